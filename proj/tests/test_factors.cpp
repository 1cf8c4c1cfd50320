#include <doctest.h>

#include "twinvio/factors.hpp"
