"""Build one radius-matched morph and one random morph, then attack the matcher with both.

Writes the parents and morphs as PGM files into ./morph_demo_out.

    python3 demos/morph_attack.py
"""
import os

from morphiris import codec, pairsel, synthgen
from morphiris.imgcore import load_pgm, save_pgm
from morphiris.morphgen import morph_pair
from morphiris.normalization import unwrap
from morphiris.segmentation import segment

OUT = "morph_demo_out"
SEED = 5
DELTA = 0.32

manifest = synthgen.generate_dataset(12, 3, (20, 38), SEED, os.path.join(OUT, "data"))


def load(entry):
    img = load_pgm(os.path.join(OUT, "data", entry.image_path))
    mask, geom = segment(img)
    return img, geom, codec.encode(unwrap(img, geom, occlusion_mask=mask))


def probes(entry):
    """The other captures of the same eye; the morph never saw these."""
    return [e for e in manifest if e.identity == entry.identity and e.stem != entry.stem]


for pair in (pairsel.select_by_radius(manifest, 1)[0], pairsel.select_random(manifest, 1, SEED)[0]):
    a, b = pair.entry_a, pair.entry_b
    img_a, geom_a, _ = load(a)
    img_b, geom_b, _ = load(b)
    morph = morph_pair(img_a, geom_a, img_b, geom_b, 0.5, (a.stem, b.stem)).morph
    save_pgm(os.path.join(OUT, f"{pair.strategy}_morph.pgm"), morph)

    m_mask, m_geom = segment(morph)
    m_code = codec.encode(unwrap(morph, m_geom, occlusion_mask=m_mask))
    print(f"{pair.strategy}: {a.stem} (pupil {a.pupil_radius:.1f}) x {b.stem} (pupil {b.pupil_radius:.1f})")
    for pa, pb in zip(probes(a), probes(b)):
        hd_a = codec.hamming(m_code, load(pa)[2]).hd
        hd_b = codec.hamming(m_code, load(pb)[2]).hd
        hit = codec.attack_success_scores(hd_a, hd_b, DELTA)
        print(f"   vs {pa.stem}: {hd_a:.3f}   vs {pb.stem}: {hd_b:.3f}   -> {'accepted as both' if hit else 'rejected'}")
