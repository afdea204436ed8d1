"""Pairwise band cross-entropy, outlier bands and 3-band groups."""
import numpy as np

from fusenet.grouping import BandChannel, cross_entropy_matrix, detect_outlier_bands, form_groups, \
    potsdam_matrix, row_magnitudes

# the published five-band Potsdam matrix (IR, R, G, B, DSM)
m = potsdam_matrix()
print(m.to_csv())
rows = row_magnitudes(m)
print("row mean |H| / median:", dict(zip(m.band_names, np.round(rows / np.median(rows), 3))))

result = form_groups(m)
print("outliers:", result.outliers)
print("groups:  ", result.groups)
for triple, score in result.triple_scores:
    print("  %-15s %.3e" % ("+".join(triple), score))

# the same thing from raw pixel values: four 8-bit bands and one 16-bit elevation-like band
rng = np.random.default_rng(1)
base = rng.integers(0, 256, 4096)
bands = [
    BandChannel("a", base),
    BandChannel("b", np.clip(base + rng.integers(-20, 20, 4096), 0, 255)),
    BandChannel("c", np.clip(255 - base + rng.integers(-20, 20, 4096), 0, 255)),
    BandChannel("d", rng.integers(0, 256, 4096)),
    BandChannel("height", rng.integers(30000, 40000, 4096)),
]
raw = cross_entropy_matrix(bands, sample_budget=2000, seed=3)
print("\nraw bands:", detect_outlier_bands(raw), form_groups(raw).groups)

# changing the log base rescales every entry and leaves the grouping alone
print("base 10 :", form_groups(cross_entropy_matrix(bands, sample_budget=2000, seed=3, log_base=10)).groups)
