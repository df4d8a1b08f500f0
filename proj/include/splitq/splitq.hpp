#pragma once

#include "splitq/error.hpp"
#include "splitq/tensor.hpp"
#include "splitq/half.hpp"
#include "splitq/synthetic.hpp"
#include "splitq/tensor_io.hpp"
#include "splitq/svd.hpp"
#include "splitq/hgq.hpp"
#include "splitq/svd_mp.hpp"
#include "splitq/cost_model.hpp"
#include "splitq/pipeline.hpp"
#include "splitq/selftest.hpp"
