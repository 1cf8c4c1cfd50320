#include <doctest.h>

#include "twinvio/alignment.hpp"
