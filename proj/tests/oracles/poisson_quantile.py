"""Poisson quantiles and normal-copula draws via scipy."""
from scipy.stats import norm, poisson

if __name__ == "__main__":
    for u, mu in [(0.5, 1.0), (0.3, 1.0), (0.999, 4.0), (0.01, 10.0), (0.5, 0.2)]:
        print("F^-1(%g; %g) =" % (u, mu), int(poisson.ppf(u, mu)))
    for z, mu in [(-1.5, 3.0), (0.0, 3.0), (2.5, 3.0), (6.0, 2.0), (8.0, 1.0)]:
        print("z=%g mu=%g ->" % (z, mu), int(poisson.isf(norm.sf(z), mu)) if z > 0 else int(poisson.ppf(norm.cdf(z), mu)))
    print("Phi^-1(0.975) =", repr(norm.ppf(0.975)))
