"""Render a few synthetic eyes, unwrap them, encode iris codes and look at the scores.

    python3 demos/recognition.py
"""
import itertools

import numpy as np

from morphiris import codec, metrics, synthgen
from morphiris.normalization import unwrap
from morphiris.segmentation import segment

SEED = 21
SUBJECTS = 8
CAPTURES = 3

codes = {}
for s, k in itertools.product(range(SUBJECTS), range(CAPTURES)):
    img, truth = synthgen.render_eye(synthgen.capture_spec(SEED, s, "L", k))
    mask, geom = segment(img)
    # the fitted circles should sit within a pixel or so of the rendered ones
    err = np.hypot(geom.pupil.cx - truth.pupil.cx, geom.pupil.cy - truth.pupil.cy)
    if k == 0:
        print(f"subject {s}: pupil r={geom.pupil.radius:5.1f} (true {truth.pupil.radius:5.1f}), "
              f"centre off by {err:.2f} px")
    codes[s, k] = codec.encode(unwrap(img, geom, occlusion_mask=mask))

mated = [codec.hamming(codes[s, i], codes[s, j]).hd
         for s in range(SUBJECTS) for i, j in itertools.combinations(range(CAPTURES), 2)]
non = [codec.hamming(codes[s, 0], codes[t, 0]).hd for s, t in itertools.combinations(range(SUBJECTS), 2)]

scores = metrics.ScoreSet(mated, non)
rate, thr = metrics.eer(scores)
print(f"\nmated HD     mean {np.mean(mated):.3f}  max {max(mated):.3f}")
print(f"non-mated HD mean {np.mean(non):.3f}  min {min(non):.3f}")
print(f"d' = {metrics.d_prime(scores):.1f}, EER = {rate:.3f} at HD {thr:.3f}")
