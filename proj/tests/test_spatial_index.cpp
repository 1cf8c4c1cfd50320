#include <doctest.h>

#include "twinvio/spatial_index.hpp"
