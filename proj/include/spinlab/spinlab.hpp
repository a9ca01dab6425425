#pragma once

#include "spinlab/autograd.hpp"
#include "spinlab/checkpoint.hpp"
#include "spinlab/corpus.hpp"
#include "spinlab/defense.hpp"
#include "spinlab/error.hpp"
#include "spinlab/layers.hpp"
#include "spinlab/meta.hpp"
#include "spinlab/metrics.hpp"
#include "spinlab/model.hpp"
#include "spinlab/poison.hpp"
#include "spinlab/random.hpp"
#include "spinlab/spin.hpp"
#include "spinlab/tokenizer.hpp"
