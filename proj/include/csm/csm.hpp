// Umbrella header.
#pragma once

#include "csm/checkpoint.hpp"
#include "csm/clickgraph.hpp"
#include "csm/dataset_io.hpp"
#include "csm/errors.hpp"
#include "csm/evaluator.hpp"
#include "csm/image_encoder.hpp"
#include "csm/index.hpp"
#include "csm/io_util.hpp"
#include "csm/model.hpp"
#include "csm/objective.hpp"
#include "csm/random.hpp"
#include "csm/ranking.hpp"
#include "csm/report.hpp"
#include "csm/synthgen.hpp"
#include "csm/tensor.hpp"
#include "csm/text_encoder.hpp"
#include "csm/trainer.hpp"
