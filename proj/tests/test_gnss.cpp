#include <doctest.h>

#include "twinvio/gnss.hpp"
