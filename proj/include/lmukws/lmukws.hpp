#pragma once

#include "lmukws/dataset.hpp"
#include "lmukws/error.hpp"
#include "lmukws/frontend.hpp"
#include "lmukws/hwmodel.hpp"
#include "lmukws/lmu.hpp"
#include "lmukws/presets.hpp"
#include "lmukws/prune.hpp"
#include "lmukws/qmodel.hpp"
#include "lmukws/quant.hpp"
#include "lmukws/rng.hpp"
#include "lmukws/serialize.hpp"
#include "lmukws/stream.hpp"
#include "lmukws/trainer.hpp"
