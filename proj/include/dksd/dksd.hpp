#pragma once

#include "dksd/audio.hpp"
#include "dksd/augment.hpp"
#include "dksd/autodiff.hpp"
#include "dksd/checkpoint.hpp"
#include "dksd/config.hpp"
#include "dksd/error.hpp"
#include "dksd/eval.hpp"
#include "dksd/experiment.hpp"
#include "dksd/features.hpp"
#include "dksd/io.hpp"
#include "dksd/koopman.hpp"
#include "dksd/linalg.hpp"
#include "dksd/mel.hpp"
#include "dksd/model.hpp"
#include "dksd/nn_ops.hpp"
#include "dksd/optim.hpp"
#include "dksd/program.hpp"
#include "dksd/synth.hpp"
#include "dksd/train.hpp"
#include "dksd/vad.hpp"
