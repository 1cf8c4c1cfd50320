#include <doctest.h>

#include "twinvio/imu_preintegration.hpp"
