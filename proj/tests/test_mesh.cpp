#include <doctest.h>

#include "twinvio/mesh.hpp"
