#pragma once

namespace invae {

// Log-gamma via Lanczos (g=7, n=9). Relative accuracy better than 1e-12
// for arguments in [1e-3, 1e9].
double log_gamma(double x);

// First and second derivatives of log_gamma.
double digamma(double x);
double trigamma(double x);

// Regularized lower incomplete gamma P(a, x). Used for chi-square CDFs.
double gamma_p(double a, double x);

// Upper tail of the chi-square distribution with df degrees of freedom.
double chi2_sf(double stat, int df);

} // namespace invae
