#pragma once

#include "sal3sd/autograd.hpp"
#include "sal3sd/checkpoint.hpp"
#include "sal3sd/config.hpp"
#include "sal3sd/data.hpp"
#include "sal3sd/error.hpp"
#include "sal3sd/imageio.hpp"
#include "sal3sd/imgproc.hpp"
#include "sal3sd/metrics.hpp"
#include "sal3sd/model.hpp"
#include "sal3sd/ops.hpp"
#include "sal3sd/pseudogt.hpp"
#include "sal3sd/rng.hpp"
#include "sal3sd/selfsup.hpp"
#include "sal3sd/tensor.hpp"
#include "sal3sd/trainer.hpp"
