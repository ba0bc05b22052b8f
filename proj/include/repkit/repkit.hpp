#pragma once

#include "repkit/config.hpp"
#include "repkit/error.hpp"
#include "repkit/eval.hpp"
#include "repkit/fewshot.hpp"
#include "repkit/log.hpp"
#include "repkit/net.hpp"
#include "repkit/optim.hpp"
#include "repkit/rng.hpp"
#include "repkit/signal.hpp"
#include "repkit/synthgen.hpp"
#include "repkit/train.hpp"
