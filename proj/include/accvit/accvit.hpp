#pragma once

// Umbrella header.

#include "accvit/attention.hpp"
#include "accvit/common.hpp"
#include "accvit/config.hpp"
#include "accvit/conv_block.hpp"
#include "accvit/digest.hpp"
#include "accvit/flops.hpp"
#include "accvit/gating.hpp"
#include "accvit/harness.hpp"
#include "accvit/io.hpp"
#include "accvit/model.hpp"
#include "accvit/ops.hpp"
#include "accvit/partition.hpp"
#include "accvit/tensor.hpp"
