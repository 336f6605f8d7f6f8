#pragma once

#include "analysis.hpp"
#include "autodiff.hpp"
#include "checkpoint.hpp"
#include "classification.hpp"
#include "config.hpp"
#include "data.hpp"
#include "errors.hpp"
#include "finetune.hpp"
#include "gating.hpp"
#include "gradcheck.hpp"
#include "layers.hpp"
#include "model.hpp"
#include "moae.hpp"
#include "moe.hpp"
#include "optim.hpp"
#include "pretrain.hpp"
#include "rng.hpp"
#include "survival.hpp"
#include "synthetic.hpp"
#include "tensor.hpp"
