#pragma once

#include "g2p/autograd.hpp"
#include "g2p/cli.hpp"
#include "g2p/data.hpp"
#include "g2p/decoding.hpp"
#include "g2p/eval.hpp"
#include "g2p/gradient_check.hpp"
#include "g2p/hash.hpp"
#include "g2p/model.hpp"
#include "g2p/parallel.hpp"
#include "g2p/selftrain.hpp"
#include "g2p/synthetic.hpp"
#include "g2p/tensor.hpp"
#include "g2p/training.hpp"
#include "g2p/unicode.hpp"
