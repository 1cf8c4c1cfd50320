#include <doctest.h>

#include "twinvio/pipeline.hpp"
