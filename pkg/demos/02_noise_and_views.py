"""Synthetic striped textures, symmetric label noise and augmented views."""
import numpy as np

from noisylab.data import SSL_AUGMENTATION, augment_batch, channel_stats, generate_synthetic, inject_noise

ds = generate_synthetic(K=4, n_per_class=200, H=16, seed=0)
print(ds.name, ds.images.shape, "class counts", np.bincount(ds.labels).tolist())

# exactly round(eta * n) labels move, each to a different class drawn uniformly
for eta in (0.0, 0.2, 0.4, 0.8):
    split = inject_noise(ds, eta, seed=1)
    agree = np.mean(split.noisy_labels == ds.labels)
    print(f"eta {eta:.1f}: {split.corrupted_mask.sum():3d} flipped, label agreement {agree:.3f}")

# with K = 4 and eta = 0.8 the true class keeps 20% of the labels while each
# wrong class receives about 26.7%: the labels point away from the truth
split = inject_noise(ds, 0.8, seed=1)
conf = np.zeros((4, 4), int)
np.add.at(conf, (ds.labels, split.noisy_labels), 1)
print("true x given counts at eta 0.8:\n", conf)

# two independently augmented views of the same images, as used for SimCLR
aug = SSL_AUGMENTATION.with_stats(*channel_stats(ds.images))
idx = np.arange(4)
a = augment_batch(ds.images, idx, aug, 0, "demo", "a")
b = augment_batch(ds.images, idx, aug, 0, "demo", "b")
print("view shapes", a.shape, "mean |a - b| per image", np.abs(a - b).mean(axis=(1, 2, 3)).round(3))
