#pragma once

#include <doctest.h>

// Relative tolerance. doctest::Approx alone adds an absolute scale of 1; the
// tiny floor here only lets exact zeros compare equal.
inline doctest::Approx near(double value, double rel) { return doctest::Approx(value).epsilon(rel).scale(1e-300); }
