"""MCP value by numerical quadrature of lambda * (1 - x/(delta*lambda))_+ on [0, t]."""
from scipy.integrate import quad


def mcp(t, lam, delta):
    val, _ = quad(lambda x: lam * max(0.0, 1 - x / (delta * lam)), 0, t, points=[delta * lam] if delta * lam < t else None)
    return val


if __name__ == "__main__":
    for t, lam, delta in [(1, 1, 3), (5, 1, 3), (0.7, 0.4, 2.5), (2.2, 0.8, 1.5)]:
        print(t, lam, delta, repr(mcp(t, lam, delta)))
