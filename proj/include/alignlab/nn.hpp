#pragma once

#include "alignlab/nn/checkpoint.hpp"
#include "alignlab/nn/forward.hpp"
#include "alignlab/nn/layers.hpp"
#include "alignlab/nn/network.hpp"
#include "alignlab/nn/train.hpp"
