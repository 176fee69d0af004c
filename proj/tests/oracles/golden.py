"""Brute-force high-precision oracles for the frozen golden values in the C++ tests.

Run with: python3 tests/oracles/golden.py
"""
from mpmath import mp, mpf, exp, log

mp.dps = 40


def bi_wkv_direct(k, v, w, u):
    T = len(k)
    out = []
    for t in range(T):
        num = mpf(0)
        den = mpf(0)
        for i in range(T):
            if i == t:
                wt = exp(mpf(u) + k[i])
            else:
                wt = exp(-(mpf(abs(t - i)) - 1) / T * w + k[i])
            num += wt * v[i]
            den += wt
        out.append(num / den)
    return out


def causal_wkv(k, v, w, u):
    # RWKV-4 convention: past token i < t weighted exp(-(t-1-i) w + k_i),
    # current token weighted exp(u + k_t).
    out = []
    for t in range(len(k)):
        num = exp(mpf(u) + k[t]) * v[t]
        den = exp(mpf(u) + k[t])
        for i in range(t):
            wt = exp(-(mpf(t - 1 - i)) * w + k[i])
            num += wt * v[i]
            den += wt
        out.append(num / den)
    return out


def ols(points):
    xs = [log(mpf(x)) for x, _ in points]
    ys = [log(mpf(y)) for _, y in points]
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    sxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys))
    sxx = sum((x - mx) ** 2 for x in xs)
    syy = sum((y - my) ** 2 for y in ys)
    slope = sxy / sxx
    intercept = my - slope * mx
    r2 = sxy * sxy / (sxx * syy)
    return slope, intercept, r2


if __name__ == "__main__":
    g = bi_wkv_direct([mpf("0.1"), mpf("-0.2"), mpf("0.3")], [1, 2, 3], mpf("0.5"), mpf("0.25"))
    print("bi_wkv T=3:", [mp.nstr(x, 20) for x in g])
    print("  halved  :", [mp.nstr(x / 2, 20) for x in g])
    c = causal_wkv([0, 0, 0, 0], [1, 2, 3, 4], mpf(1), mpf(0))
    print("causal T=4:", [mp.nstr(x, 20) for x in c])
    s, i, r2 = ols([(1, 1), (2, 2), (4, 5)])
    print("ols:", mp.nstr(s, 20), mp.nstr(i, 20), mp.nstr(r2, 20))
