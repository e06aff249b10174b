#include <pybind11/pybind11.h>
PYBIND11_MODULE(_avflow, m) { m.doc() = "avflow core bindings"; }
