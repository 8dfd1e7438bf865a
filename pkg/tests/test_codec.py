import numpy as np
import pytest

from morphiris.codec import (ComparisonError, EncodeError, HammingComparator, IrisCode, ScoreFileComparator,
                             ScoreRow, attack_success, attack_success_scores, code_from_bytes, code_rows,
                             code_to_bytes, encode, hamming, hamming_many, load_code, load_scores, log_gabor,
                             save_code, save_scores)
from morphiris.normalization import RubberSheet


def sheet_of(values, valid=None):
    values = np.asarray(values, float)
    return RubberSheet(values, np.ones(values.shape, bool) if valid is None else valid)


def random_code(rng, rows=16, cols=512, masked=0.0):
    return IrisCode(rng.random((rows, cols, 2)) < 0.5, rng.random((rows, cols)) >= masked)


def test_constant_sheet_masks_everything():
    code = encode(sheet_of(np.full((64, 512), 117.0)))
    assert not code.mask.any()


def test_all_invalid_sheet_rejected():
    with pytest.raises(EncodeError):
        encode(sheet_of(np.ones((64, 512)), np.zeros((64, 512), bool)))


def test_filter_is_one_sided_and_peaks_at_wavelength():
    h = log_gabor(512, 32, 0.5)
    freqs = np.fft.fftfreq(512)
    assert (h[freqs <= 0] == 0).all()
    assert np.argmax(h) == 512 // 32 and h[16] == 1.0


def test_code_rows_evenly_spaced():
    assert code_rows(64, 16).tolist() == list(range(2, 64, 4))
    assert code_rows(64, 1).tolist() == [32]


@pytest.mark.parametrize("phase", np.linspace(0, 2 * np.pi, 8, endpoint=False) + 0.1)
def test_sinusoid_bits_alternate(phase):
    lam = 32
    j = np.arange(512)
    row = 128 + 50 * np.cos(2 * np.pi * j / lam + phase)
    code = encode(sheet_of(np.tile(row, (64, 1))), wavelength=lam)
    expect = np.cos(2 * np.pi * j / lam + phase) >= 0
    assert code.mask.all()
    assert (code.bits[:, :, 0] == expect).all()
    assert (code.bits[:, :, 1] == (np.sin(2 * np.pi * j / lam + phase) >= 0)).all()
    # runs of equal real bits are half a wavelength long
    edges = np.nonzero(np.diff(code.bits[0, :, 0].astype(int)))[0]
    assert set(np.diff(edges)) == {lam // 2}


def test_against_direct_circular_convolution(rng):
    n, lam = 128, 16
    sheet = sheet_of(rng.uniform(0, 255, (8, n)))
    kernel = np.fft.ifft(log_gabor(n, lam, 0.5))  # impulse response
    rows = code_rows(8, 4)
    ref = np.array([[sum(sheet.intensity[r, (j - k) % n] * kernel[k] for k in range(n)) for j in range(n)]
                    for r in rows])
    code = encode(sheet, wavelength=lam, rows_used=4)
    safe = np.abs(ref.real) > 1e-6
    assert (code.bits[:, :, 0][safe] == (ref.real >= 0)[safe]).all()
    safe = np.abs(ref.imag) > 1e-6
    assert (code.bits[:, :, 1][safe] == (ref.imag >= 0)[safe]).all()


def test_encode_deterministic(rng):
    sheet = sheet_of(rng.uniform(0, 255, (64, 512)))
    assert encode(sheet) == encode(sheet)


def test_hamming_identity_complement_rotation(rng):
    code = random_code(rng)
    s = hamming(code, code)
    assert (s.hd, s.best_shift) == (0.0, 0)
    comp = IrisCode(~code.bits, code.mask)
    assert hamming(comp, code, 0).hd == 1.0
    assert hamming(comp, code).hd <= 1.0
    for k in (1, 3, 8):
        a = hamming(code, code.rotated(k))
        b = hamming(code.rotated(k), code)
        assert a.hd == b.hd == 0.0
        assert {a.best_shift, b.best_shift} == {k, -k}


def test_hamming_random_codes(rng):
    hds0 = [hamming(random_code(rng), random_code(rng), 0).hd for _ in range(100)]
    assert abs(np.mean(hds0) - 0.5) < 0.02
    a, b = random_code(rng), random_code(rng)
    assert hamming(a, b).hd < hamming(a, b, 0).hd


def test_hamming_symmetric_and_matches_bitwise_oracle(rng):
    for _ in range(5):
        a, b = random_code(rng, 8, 64, 0.3), random_code(rng, 8, 64, 0.3)
        assert hamming(a, b, 4).hd == hamming(b, a, 4).hd
        best = []
        for s in range(-4, 5):
            bb, bm = np.roll(b.bits, s, axis=1), np.roll(b.mask, s, axis=1)
            joint = a.mask & bm
            dis = (a.bits != bb) & joint[:, :, None]
            best.append(dis.sum() / (2 * joint.sum()))
        assert hamming(a, b, 4).hd == pytest.approx(min(best), abs=1e-15)


def test_hamming_errors(rng):
    a = random_code(rng, 4, 32)
    with pytest.raises(ComparisonError):
        hamming(a, random_code(rng, 4, 64))
    empty = IrisCode(a.bits, np.zeros_like(a.mask))
    with pytest.raises(ComparisonError):
        hamming(a, empty)
    hd, _, valid = hamming_many(a, [empty, a])
    assert np.isnan(hd[0]) and hd[1] == 0 and valid[0] == 0


def test_attack_success_examples():
    assert attack_success_scores(0.20, 0.28, 0.32)
    assert not attack_success_scores(0.20, 0.40, 0.32)
    assert attack_success_scores(0.32, 0.1, 0.32)


def test_attack_success_on_codes(rng):
    a = random_code(rng)
    assert attack_success(a, a, a.rotated(2))
    assert not attack_success(a, a, random_code(rng))


def test_code_and_score_files(tmp_path, rng):
    code = random_code(rng, 5, 37, 0.2)
    assert code_from_bytes(code_to_bytes(code)) == code
    save_code(tmp_path / "c.irc", code)
    assert load_code(tmp_path / "c.irc") == code
    with pytest.raises(ValueError):
        code_from_bytes(b"XXXX" + code_to_bytes(code)[4:])
    with pytest.raises(ValueError):
        code_from_bytes(code_to_bytes(code)[:-1])
    rows = [ScoreRow("a", "b", "mated", 0.1 + 1e-17, 0), ScoreRow("a", "c", "nonmated", 1 / 3, -4)]
    save_scores(tmp_path / "s.csv", rows)
    assert load_scores(tmp_path / "s.csv") == rows


def test_comparators(rng):
    a, b = random_code(rng), random_code(rng)
    hc = HammingComparator({"a": a, "b": b})
    assert hc.compare("a", "b") == hamming(a, b).hd
    sc = ScoreFileComparator([ScoreRow("a", "b", "nonmated", 0.4)])
    assert sc.compare("b", "a") == 0.4
    with pytest.raises(ComparisonError):
        sc.compare("a", "z")


def test_synthetic_codes_separate(smoke_codes):
    from morphiris import metrics
    mated = [hamming(smoke_codes[(s, i)], smoke_codes[(s, j)]).hd for s in range(10)
             for i in range(4) for j in range(i + 1, 4)]
    non = [hamming(smoke_codes[(s, 0)], smoke_codes[(t, 0)]).hd for s in range(10) for t in range(s + 1, 10)]
    assert metrics.d_prime(metrics.ScoreSet(mated, non)) >= 2
    assert max(mated) < 0.32 < min(non)
