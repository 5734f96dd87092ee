#pragma once

#include "xvage/audio.hpp"
#include "xvage/checkpoint.hpp"
#include "xvage/commands.hpp"
#include "xvage/config.hpp"
#include "xvage/data_ingest.hpp"
#include "xvage/error.hpp"
#include "xvage/evaluation.hpp"
#include "xvage/features.hpp"
#include "xvage/loss.hpp"
#include "xvage/network.hpp"
#include "xvage/nn.hpp"
#include "xvage/optim.hpp"
#include "xvage/pipeline.hpp"
#include "xvage/synth.hpp"
#include "xvage/training.hpp"
