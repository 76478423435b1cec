"""Reference values for the SSIM and PCA fixtures in acceptance.rs.

Direct-formula implementations: a full 2-D Gaussian window summed per output
pixel for SSIM, and numpy's symmetric eigensolver for PCA.
"""
import numpy as np


def pattern_a(c, r, k):
    return 0.8 * np.sin(0.37 * r + 0.23 * k + 1.1 * c)


def pattern_b(c, r, k):
    return 0.6 * np.cos(0.29 * r - 0.41 * k + 0.7 * c) + 0.1 * np.sin(0.05 * r * k)


def image(fn, size=16):
    c, r, k = np.meshgrid(np.arange(3), np.arange(size), np.arange(size), indexing="ij")
    return fn(c.astype(np.float64), r.astype(np.float64), k.astype(np.float64)).astype(np.float32).astype(np.float64)


def ssim(x, y, win=11, sigma=1.5, k1=0.01, k2=0.03):
    def luma(img):
        u = (img + 1.0) / 2.0
        return 0.299 * u[0] + 0.587 * u[1] + 0.114 * u[2]

    a, b = luma(x), luma(y)
    d = np.arange(win) - win // 2
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2 * sigma * sigma))
    g /= g.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    h, w = a.shape
    vals = []
    for i in range(h - win + 1):
        for j in range(w - win + 1):
            pa = a[i:i + win, j:j + win]
            pb = b[i:i + win, j:j + win]
            ma, mb = (g * pa).sum(), (g * pb).sum()
            va = (g * pa * pa).sum() - ma * ma
            vb = (g * pb * pb).sum() - mb * mb
            cov = (g * pa * pb).sum() - ma * mb
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def latents(n=8, c=8, s=4):
    z = np.zeros((n, c, s, s))
    for i in range(n):
        for ch in range(c):
            for r in range(s):
                for k in range(s):
                    idx = ((i * c + ch) * s + r) * s + k
                    z[i, ch, r, k] = np.sin(0.7 * idx + 0.3 * ch * ch) + 0.5 * (ch + 1) * np.cos(1.3 * i + r - 0.5 * k * ch)
    return z.astype(np.float32).astype(np.float64)


def pca(z):
    n, c, h, w = z.shape
    v = z.transpose(0, 2, 3, 1).reshape(-1, c)
    mean = v.mean(axis=0)
    d = v - mean
    cov = d.T @ d / len(v)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:3]
    comps = vecs[:, order].T
    for k in range(3):
        if comps[k][np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    return mean, vals[order], comps


if __name__ == "__main__":
    np.set_printoptions(precision=17)
    a, b = image(pattern_a), image(pattern_b)
    print("ssim(a, b) =", repr(ssim(a, b)))
    print("ssim(a, 0.5a) =", repr(ssim(a, (a * 0.5).astype(np.float32).astype(np.float64))))
    mean, vals, comps = pca(latents())
    print("mean =", [repr(float(x)) for x in mean])
    print("eigenvalues =", [repr(float(x)) for x in vals])
    for k in range(3):
        print(f"component {k} =", [repr(float(x)) for x in comps[k]])
