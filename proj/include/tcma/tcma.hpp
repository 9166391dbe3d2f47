// Umbrella header.

#ifndef TCMA_TCMA_HPP
#define TCMA_TCMA_HPP

#include "tcma/alignment.hpp"
#include "tcma/autodiff.hpp"
#include "tcma/binary_format.hpp"
#include "tcma/corpus.hpp"
#include "tcma/error.hpp"
#include "tcma/loss.hpp"
#include "tcma/objective.hpp"
#include "tcma/parallel.hpp"
#include "tcma/random.hpp"
#include "tcma/retrieval.hpp"
#include "tcma/tensor.hpp"
#include "tcma/trainer.hpp"

#endif  // TCMA_TCMA_HPP
