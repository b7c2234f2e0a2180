#pragma once

namespace hulm::stats {

// Regularized incomplete gamma P(a,x) and Q(a,x) = 1 - P(a,x).
double regularized_gamma_p(double a, double x);
double regularized_gamma_q(double a, double x);

// Regularized incomplete beta I_x(a,b).
double regularized_beta(double a, double b, double x);

// Survival functions.
double chi2_sf(double x, double dof);
// two-sided p-value for a t statistic with dof degrees of freedom
double t_two_sided_p(double t, double dof);

// Exact binomial terms via log-gamma.
double binom_pmf(int n, int k, double p);
double binom_cdf_leq(int n, int k, double p);

}  // namespace hulm::stats
