#include <doctest.h>

#include "twinvio/estimator.hpp"
