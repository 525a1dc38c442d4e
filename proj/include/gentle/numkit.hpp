#pragma once

#include "gentle/numkit/adam.hpp"
#include "gentle/numkit/gradcheck.hpp"
#include "gentle/numkit/mlp.hpp"
#include "gentle/numkit/rng.hpp"
#include "gentle/numkit/snapshot.hpp"
