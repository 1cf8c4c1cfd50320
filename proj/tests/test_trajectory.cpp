#include <doctest.h>

#include "twinvio/trajectory.hpp"
