// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cirr/adam.hpp"
#include "cirr/config.hpp"
#include "cirr/encoder.hpp"
#include "cirr/error.hpp"
#include "cirr/experiment.hpp"
#include "cirr/io.hpp"
#include "cirr/metrics.hpp"
#include "cirr/model.hpp"
#include "cirr/random.hpp"
#include "cirr/ranker.hpp"
#include "cirr/retriever.hpp"
#include "cirr/softmax_loss.hpp"
#include "cirr/split.hpp"
#include "cirr/synth.hpp"
#include "cirr/tensor.hpp"
#include "cirr/trainer.hpp"
#include "cirr/types.hpp"
