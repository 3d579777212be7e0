#pragma once

#include "adam.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "tensor.hpp"
