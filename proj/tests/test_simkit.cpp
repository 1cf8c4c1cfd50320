#include <doctest.h>

#include "twinvio/simkit.hpp"
