#pragma once

#include "mssar/tensor.hpp"
#include "mssar/tape.hpp"
#include "mssar/ops.hpp"
#include "mssar/random.hpp"
#include "mssar/integral_pooling.hpp"
#include "mssar/parameters.hpp"
#include "mssar/recalibration.hpp"
#include "mssar/network_spec.hpp"
#include "mssar/blocks.hpp"
#include "mssar/cost_model.hpp"
#include "mssar/optimizer.hpp"
#include "mssar/dataset.hpp"
#include "mssar/synthetic.hpp"
#include "mssar/trainer.hpp"
#include "mssar/weights_io.hpp"
#include "mssar/gradcheck.hpp"
#include "mssar/config.hpp"
#include "mssar/commands.hpp"
