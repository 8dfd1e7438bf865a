"""Train the single-image morph detector on one kind of morph and test it on the other.

Runs both feature extractors in both directions on a small synthetic set.

    python3 demos/detector.py
"""
import os
import tempfile

from morphiris import harness, mad
from morphiris.imgcore import load_pgm
from morphiris.pairsel import DatasetManifest

work = tempfile.mkdtemp(prefix="mad_demo_")
cfg = harness.parse_config("seed = 3\ngen.n_subjects = 16\npairs.n_pairs = 20\nmad.enabled = false\n"
                           "codec.wavelengths = 24\n")
harness.cmd_run(cfg, work)

data = os.path.join(work, "data")
manifest = DatasetManifest.load(os.path.join(data, "manifest.csv"))
bona = [(e.subject_id, load_pgm(os.path.join(data, e.image_path))) for e in manifest]
morphs = {s: [load_pgm(os.path.join(work, "morphs", s, f)) for f in sorted(os.listdir(os.path.join(work, "morphs", s)))
              if f.startswith("M_")] for s in ("random", "radius")}

for extractor in mad.EXTRACTORS:
    for train, test in (("random", "radius"), ("radius", "random")):
        rep = mad.smad_experiment(bona, morphs[train], morphs[test], extractor, split_seed=1, n_trees=60)
        print(f"{extractor:>4} features, train on {train:>6} morphs, test on {test:>6}: "
              f"EER {rep['eer']:.3f}  BPCER@MACER<=10% {rep['bpcer_at']['0.10']}")
