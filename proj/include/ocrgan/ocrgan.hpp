#pragma once

#include "ocrgan/checkpoint.hpp"
#include "ocrgan/chselect.hpp"
#include "ocrgan/config.hpp"
#include "ocrgan/data.hpp"
#include "ocrgan/evalkit.hpp"
#include "ocrgan/forgery.hpp"
#include "ocrgan/freqdecomp.hpp"
#include "ocrgan/models.hpp"
#include "ocrgan/objectives.hpp"
#include "ocrgan/trainer.hpp"
