#pragma once

#include "dlnet/errors.hpp"
#include "dlnet/matrix.hpp"
#include "dlnet/network.hpp"
#include "dlnet/balance.hpp"
#include "dlnet/stepsize.hpp"
#include "dlnet/trainer.hpp"
#include "dlnet/flow.hpp"
#include "dlnet/harness.hpp"
