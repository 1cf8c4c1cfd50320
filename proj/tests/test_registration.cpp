#include <doctest.h>

#include "twinvio/registration.hpp"
