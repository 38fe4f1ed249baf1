#pragma once

#include "museformer/attention.hpp"
#include "museformer/bar_selection.hpp"
#include "museformer/checkpoint.hpp"
#include "museformer/fc_attention.hpp"
#include "museformer/generate.hpp"
#include "museformer/grad_check.hpp"
#include "museformer/layout.hpp"
#include "museformer/midi.hpp"
#include "museformer/model.hpp"
#include "museformer/similarity.hpp"
#include "museformer/synthetic.hpp"
#include "museformer/tensor.hpp"
#include "museformer/tokenizer.hpp"
#include "museformer/tracks.hpp"
#include "museformer/training.hpp"
