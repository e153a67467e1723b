#pragma once

#include "protoseg/bcma.hpp"
#include "protoseg/checkpoint.hpp"
#include "protoseg/config.hpp"
#include "protoseg/encoder.hpp"
#include "protoseg/episodes.hpp"
#include "protoseg/evaluate.hpp"
#include "protoseg/fspa.hpp"
#include "protoseg/image.hpp"
#include "protoseg/numerics.hpp"
#include "protoseg/phantom.hpp"
#include "protoseg/pipeline.hpp"
#include "protoseg/ran.hpp"
#include "protoseg/segmenter.hpp"
#include "protoseg/slic.hpp"
#include "protoseg/tape.hpp"
#include "protoseg/train.hpp"
