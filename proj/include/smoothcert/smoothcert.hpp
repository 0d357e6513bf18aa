#pragma once

#include "smoothcert/certify.hpp"
#include "smoothcert/checkpoint.hpp"
#include "smoothcert/config.hpp"
#include "smoothcert/data.hpp"
#include "smoothcert/error.hpp"
#include "smoothcert/format.hpp"
#include "smoothcert/layers.hpp"
#include "smoothcert/loss.hpp"
#include "smoothcert/model.hpp"
#include "smoothcert/norms.hpp"
#include "smoothcert/optim.hpp"
#include "smoothcert/parallel.hpp"
#include "smoothcert/pipeline.hpp"
#include "smoothcert/random.hpp"
#include "smoothcert/report.hpp"
#include "smoothcert/stats.hpp"
#include "smoothcert/tensor.hpp"
#include "smoothcert/trainer.hpp"
