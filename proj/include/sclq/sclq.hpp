#ifndef SCLQ_SCLQ_HPP
#define SCLQ_SCLQ_HPP

#include "errors.hpp"
#include "observable.hpp"
#include "fiber.hpp"
#include "intersections.hpp"
#include "semiclassics.hpp"
#include "quantum_oracle.hpp"
#include "star_product.hpp"
#include "experiment.hpp"

#endif
