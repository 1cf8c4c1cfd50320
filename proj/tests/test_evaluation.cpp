#include <doctest.h>

#include "twinvio/evaluation.hpp"
