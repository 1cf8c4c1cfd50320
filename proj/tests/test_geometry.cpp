#include <doctest.h>

#include "twinvio/geometry.hpp"
