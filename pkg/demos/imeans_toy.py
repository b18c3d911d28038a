"""
Counting new clusters in a stream
=================================

Two known Gaussian blobs sit near the origin.  The stream then brings two
new blobs far away.  I-means warms up on the first points it sees and then
decides, point by point, whether to join an existing cluster or open a new
one.
"""
import numpy as np

from negmgan.imeans import IMeans, IMeansConfig

rng = np.random.default_rng(3)

# known classes: one blob on each side of the origin
known = np.vstack([rng.normal(-2, 1, size=(300, 2)), rng.normal(2, 1, size=(300, 2))])
labels = np.repeat(["left", "right"], 300)

# the stream: two blobs nobody has seen before, interleaved
new = np.vstack([rng.normal([30, 0], 1, size=(250, 2)), rng.normal([0, 30], 1, size=(250, 2))])
stream = new[rng.permutation(len(new))]

est = IMeans.from_labeled(known, labels, config=IMeansConfig(warmup_size=200, seed=0))
print("clusters before the stream:", est.n_clusters)

delta, decisions = est.feed(stream)
print("new clusters found:", delta)

# how many stream points ended up in each cluster
targets = np.array([d.cluster for d in decisions])
for k in np.unique(targets):
    c = est.clusters[k]
    print(f"  cluster {k} ({c.origin}): {np.sum(targets == k)} points, mean {np.round(c.mean, 1)}")

# the Beta prior each known cluster got from the warm-up counting
for k, b in enumerate(est.beta[:2]):
    print(f"  known cluster {k}: outliers {b.a0}, inliers {b.b0}, theta {est.theta(k):.2f}")
