#pragma once

#include "condtok/error.hpp"
#include "condtok/rng.hpp"
#include "condtok/matrix.hpp"
#include "condtok/svd.hpp"
#include "condtok/conditioning.hpp"
#include "condtok/kv.hpp"
#include "condtok/attention.hpp"
#include "condtok/autodiff.hpp"
#include "condtok/training.hpp"
