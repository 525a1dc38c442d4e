#pragma once

#include "gentle/datagen.hpp"
#include "gentle/dynmodel.hpp"
#include "gentle/env.hpp"
#include "gentle/errors.hpp"
#include "gentle/evalkit.hpp"
#include "gentle/numkit.hpp"
#include "gentle/offpolicy.hpp"
#include "gentle/pipeline.hpp"
#include "gentle/relabel.hpp"
#include "gentle/tae.hpp"
#include "gentle/trainer.hpp"
