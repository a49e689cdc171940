#pragma once

#include "s3tu/tensor.hpp"
#include "s3tu/rng.hpp"
#include "s3tu/autodiff.hpp"
#include "s3tu/ops.hpp"
#include "s3tu/conv.hpp"
#include "s3tu/norm.hpp"
#include "s3tu/params.hpp"
#include "s3tu/layers.hpp"
#include "s3tu/blocks.hpp"
#include "s3tu/rm_svit.hpp"
#include "s3tu/s2_mlp_link.hpp"
#include "s3tu/model.hpp"
#include "s3tu/metrics.hpp"
#include "s3tu/data.hpp"
#include "s3tu/train.hpp"
#include "s3tu/gradcheck.hpp"
