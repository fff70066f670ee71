#include "catch2/catch_amalgamated.hpp"
#include "csm/csm.hpp"
