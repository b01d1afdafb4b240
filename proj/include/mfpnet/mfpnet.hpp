#pragma once

#include "mfpnet/error.hpp"
#include "mfpnet/tensor.hpp"
#include "mfpnet/flops.hpp"
#include "mfpnet/autograd.hpp"
#include "mfpnet/kernels.hpp"
#include "mfpnet/registry.hpp"
#include "mfpnet/blocks.hpp"
#include "mfpnet/sgcn.hpp"
#include "mfpnet/network.hpp"
#include "mfpnet/weights.hpp"
#include "mfpnet/accounting.hpp"
#include "mfpnet/data.hpp"
#include "mfpnet/train.hpp"
#include "mfpnet/gradcheck.hpp"
#include "mfpnet/gradsuite.hpp"
#include "mfpnet/config.hpp"
