#pragma once

// glibc's <resolv.h>, pulled in by httplib, defines `_res` as a macro and
// breaks any Eigen header parsed after it. Eigen goes first.
#include <Eigen/Dense>
#include <httplib.h>
