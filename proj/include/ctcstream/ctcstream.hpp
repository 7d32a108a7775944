#pragma once

#include "ctcstream/charlm.hpp"
#include "ctcstream/core.hpp"
#include "ctcstream/decoder.hpp"
#include "ctcstream/emission.hpp"
#include "ctcstream/error.hpp"
#include "ctcstream/metrics.hpp"
#include "ctcstream/oracle.hpp"
#include "ctcstream/synth.hpp"
