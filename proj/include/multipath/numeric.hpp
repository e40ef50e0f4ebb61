#pragma once

// Core numeric modules are compiled once per floating-point precision. Each
// build lives in its own inline namespace so a float engine and a double
// gradient-checking build can be linked into the same binary.
#if defined(MULTIPATH_DOUBLE)
#define MULTIPATH_NUMERIC_NS f64
#else
#define MULTIPATH_NUMERIC_NS f32
#endif

namespace multipath {
inline namespace MULTIPATH_NUMERIC_NS {

#if defined(MULTIPATH_DOUBLE)
using real = double;
#else
using real = float;
#endif

}  // namespace MULTIPATH_NUMERIC_NS
}  // namespace multipath
