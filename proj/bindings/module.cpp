#include <pybind11/pybind11.h>
PYBIND11_MODULE(_pyramidat, m) { m.doc() = "placeholder"; }
