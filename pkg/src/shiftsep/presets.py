"""Named synthetic datasets used by the CLI and the acceptance suite."""

from .exceptions import InvalidArgumentError
from .synth import LIBRARY, cosine_similarity, generate_correlated_pair, generate_physical, generate_random, make_lattice_array

# Physical presets use a 4x4 lattice spaced 3 apart, spanning [0, 9] in x and y,
# so that the "inside" sources fall inside the array and the "outside" ones do not.
PHYSICAL_SPACING = 3.0
PHYSICAL_SPEED = 0.5
PHYSICAL_AMPLITUDES = (0.9, 0.6, 0.8)
INSIDE_SOURCES = ((3.0, 7.0), (3.5, 3.0), (6.8, 5.0))
OUTSIDE_SOURCES = ((-3.0, 6.0), (10.0, 3.0), (10.8, 9.6))

_RANDOM = {
    "random-1x4": (("pulse",), 4),
    "random-2x16": (("pulse", "hump"), 16),
    "random-3x18": (("pulse", "chirp", "hump"), 18),
    "random-4x24": (("pulse", "chirp", "hump", "burst"), 24),
}
_PHYSICAL_WAVES = ("early-pulse", "mid-chirp", "late-burst")
_PHYSICAL = {"inside-3x16": INSIDE_SOURCES, "outside-3x16": OUTSIDE_SOURCES}

PRESETS = tuple(_RANDOM) + tuple(_PHYSICAL) + ("fig1",)


def make_preset(name, seed=0, similarity=0.0, noise_sigma=0.0):
    """Build a named dataset. ``similarity`` only applies to ``fig1``."""
    if name in _RANDOM:
        waves, n = _RANDOM[name]
        return generate_random([LIBRARY[w] for w in waves], make_lattice_array(n), seed=seed,
                               noise_sigma=noise_sigma)
    if name in _PHYSICAL:
        ds = generate_physical([LIBRARY[w] for w in _PHYSICAL_WAVES], _PHYSICAL[name],
                               PHYSICAL_AMPLITUDES, PHYSICAL_SPEED, "inv-sqrt-r",
                               make_lattice_array(16, spacing=PHYSICAL_SPACING), seed=seed,
                               noise_sigma=noise_sigma)
        return ds
    if name == "fig1":
        w1, w2 = generate_correlated_pair(LIBRARY["pulse"], similarity, seed=seed)
        ds = generate_random([w1, w2, LIBRARY["hump"].render()], make_lattice_array(18), seed=seed,
                             noise_sigma=noise_sigma)
        ds.truth["similarity"] = cosine_similarity(w1, w2)
        return ds
    raise InvalidArgumentError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
