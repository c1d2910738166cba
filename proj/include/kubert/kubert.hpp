#pragma once

#include "kubert/bert.hpp"
#include "kubert/classifiers.hpp"
#include "kubert/corpus.hpp"
#include "kubert/io.hpp"
#include "kubert/metrics.hpp"
#include "kubert/normalizer.hpp"
#include "kubert/pipeline_config.hpp"
#include "kubert/pretrain.hpp"
#include "kubert/tokenizer.hpp"
#include "kubert/utf8.hpp"
