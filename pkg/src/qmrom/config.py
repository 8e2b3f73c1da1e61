"""INI configuration: strict parsing with line numbers and typed defaults.

Sections: mesh, material, loading, rom, ecsw, predictive, output. Only
``loading.u_end`` is mandatory; every other key carries a default.
Unknown keys, duplicates, type errors and range violations are rejected
with the offending line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .errors import ConfigError
from .fom import LoadingProgram, Mesh1D
from .material import MaterialParams


@dataclass(frozen=True)
class MeshSettings:
    length: float = 10.0
    n_elements: int = 50
    defect_element: int | None = None     # None means centered
    defect_factor: float = 0.98

    def make(self) -> Mesh1D:
        defect = self.defect_element
        if defect is None:
            defect = self.n_elements // 2
        return Mesh1D.uniform(self.length, self.n_elements, defect, self.defect_factor)


@dataclass(frozen=True)
class RomSettings:
    k: int = 50
    l: int = 50
    m: int = 50
    q: int = 5
    p: int = 2
    gamma_u: float = 3.0
    gamma_d: float = 1.0
    gamma_t: float = 3.0
    tol: float = 1e-10
    max_iter: int = 25
    multistate: bool = False
    k_e: int = 2
    k_h: int = 10
    k_s: int = 20
    seed: int = 42
    oversample: int = 10


@dataclass(frozen=True)
class EcswSettings:
    tau: float = 1e-5
    train_stride: int = 1


@dataclass(frozen=True)
class PredictiveSettings:
    deviation_percent: float = 50.0


@dataclass(frozen=True)
class Config:
    mesh: MeshSettings
    material: MaterialParams
    loading: LoadingProgram
    rom: RomSettings
    ecsw: EcswSettings
    predictive: PredictiveSettings
    output_dir: str = "out"

    def make_mesh(self) -> Mesh1D:
        return self.mesh.make()

    def with_elastic_scaled(self, factor: float) -> "Config":
        """New config with the elastic modulus scaled by ``factor``."""
        material = dataclasses.replace(self.material, E=self.material.E * factor)
        return dataclasses.replace(self, material=material)


def _scan(path):
    """Raw (section, key) -> (value, line) map with duplicate detection."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    entries: dict[tuple[str, str], tuple[str, int]] = {}
    section = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#") or line.startswith(";"):
            continue
        for marker in (" #", "\t#"):
            cut = line.find(marker)
            if cut >= 0:
                line = line[:cut].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if not section:
                raise ConfigError("empty section header", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", line=lineno)
        if section is None:
            raise ConfigError("key before any [section] header", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if not key:
            raise ConfigError("empty key", line=lineno)
        if (section, key) in entries:
            first_line = entries[(section, key)][1]
            raise ConfigError(
                f"duplicate key '{key}' in [{section}] (lines {first_line} and {lineno})",
                line=lineno,
            )
        entries[(section, key)] = (value, lineno)
    return entries


def _pop(entries, section, key):
    return entries.pop((section, key), None)


def _as_float(raw, section, key):
    value, line = raw
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be a number, got {value!r}", line=line)


def _as_int(raw, section, key):
    value, line = raw
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be an integer, got {value!r}", line=line)


def _as_bool(raw, section, key):
    value, line = raw
    lowered = value.lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"[{section}] {key} must be a boolean, got {value!r}", line=line)


def _range_check(ok: bool, message: str, raw):
    if not ok:
        raise ConfigError(message, line=raw[1] if raw else None)


_MATERIAL_KEYS = {
    "e": "E", "sigma_y0": "sigma_y0", "a_kin": "a_kin", "p_iso": "P_iso",
    "e_p": "e_p", "f_p": "f_p", "y0": "Y0", "e_d": "e_d", "f_d_hard": "f_d_hard",
    "a_grad": "A_grad", "h_pen": "H_pen", "c_heat": "c_heat", "alpha": "alpha",
    "k0": "K0", "kc": "Kc", "theta0": "theta0", "omega": "omega", "d_max": "D_max",
}


def parse_config(path) -> Config:
    entries = _scan(path)

    # mesh ------------------------------------------------------------------
    mesh_kwargs = {}
    raw = _pop(entries, "mesh", "length")
    if raw:
        mesh_kwargs["length"] = _as_float(raw, "mesh", "length")
        _range_check(mesh_kwargs["length"] > 0, "[mesh] length must be positive", raw)
    raw = _pop(entries, "mesh", "n_elements")
    if raw:
        mesh_kwargs["n_elements"] = _as_int(raw, "mesh", "n_elements")
        _range_check(mesh_kwargs["n_elements"] >= 1, "[mesh] n_elements must be >= 1", raw)
    raw = _pop(entries, "mesh", "defect_element")
    if raw:
        if raw[0].lower() == "none":
            mesh_kwargs["defect_element"] = None
            mesh_kwargs.setdefault("defect_factor", 1.0)
        else:
            mesh_kwargs["defect_element"] = _as_int(raw, "mesh", "defect_element")
    raw = _pop(entries, "mesh", "defect_factor")
    if raw:
        mesh_kwargs["defect_factor"] = _as_float(raw, "mesh", "defect_factor")
        _range_check(0.0 < mesh_kwargs["defect_factor"] <= 1.0,
                     "[mesh] defect_factor must lie in (0, 1]", raw)
    mesh = MeshSettings(**mesh_kwargs)
    n_el = mesh.n_elements
    if mesh.defect_element is not None and not (0 <= mesh.defect_element < n_el):
        raise ConfigError(f"[mesh] defect_element must lie in [0, {n_el})")

    # material ---------------------------------------------------------------
    mat_kwargs = {}
    for key, attr in _MATERIAL_KEYS.items():
        raw = _pop(entries, "material", key)
        if raw:
            mat_kwargs[attr] = _as_float(raw, "material", key)
    try:
        material = MaterialParams(**mat_kwargs)
        material.validate()
    except Exception as exc:
        raise ConfigError(f"[material] invalid parameters: {exc}") from exc

    # loading ----------------------------------------------------------------
    raw_u = _pop(entries, "loading", "u_end")
    if raw_u is None:
        raise ConfigError("[loading] u_end is mandatory")
    u_end = _as_float(raw_u, "loading", "u_end")
    raw = _pop(entries, "loading", "n_step")
    n_step = _as_int(raw, "loading", "n_step") if raw else 100
    _range_check(n_step >= 1, "[loading] n_step must be >= 1", raw)
    raw = _pop(entries, "loading", "t_end")
    t_end = _as_float(raw, "loading", "t_end") if raw else 1.0
    _range_check(t_end > 0, "[loading] t_end must be positive", raw)
    raw_unit = _pop(entries, "loading", "theta_unit")
    unit = raw_unit[0].upper() if raw_unit else "K"
    if unit not in ("K", "C"):
        raise ConfigError("[loading] theta_unit must be K or C",
                          line=raw_unit[1] if raw_unit else None)
    offset = 0.0 if unit == "K" else 273.15

    def _theta(key):
        raw = _pop(entries, "loading", key)
        if raw is None or raw[0].lower() == "none":
            return None
        return _as_float(raw, "loading", key) + offset

    loading = LoadingProgram(u_end=u_end, n_step=n_step, t_end=t_end,
                             theta_left=_theta("theta_left"),
                             theta_right=_theta("theta_right"))

    # rom ---------------------------------------------------------------------
    rom_kwargs = {}
    int_keys = ("k", "l", "m", "q", "p", "max_iter", "k_e", "k_h", "k_s", "seed", "oversample")
    for key in int_keys:
        raw = _pop(entries, "rom", key)
        if raw:
            rom_kwargs[key] = _as_int(raw, "rom", key)
    float_keys = ("gamma_u", "gamma_d", "gamma_t", "tol")
    for key in float_keys:
        raw = _pop(entries, "rom", key)
        if raw:
            rom_kwargs[key] = _as_float(raw, "rom", key)
    raw = _pop(entries, "rom", "multistate")
    if raw:
        rom_kwargs["multistate"] = _as_bool(raw, "rom", "multistate")
    rom = RomSettings(**rom_kwargs)
    if min(rom.k, rom.l, rom.m, rom.q, rom.k_e, rom.k_h, rom.k_s, rom.oversample) < 0:
        raise ConfigError("[rom] mode counts must be non-negative")
    if rom.p < 2:
        raise ConfigError("[rom] polynomial order p must be >= 2")
    if rom.tol <= 0 or rom.max_iter < 1:
        raise ConfigError("[rom] tol must be positive and max_iter >= 1")
    if min(rom.gamma_u, rom.gamma_d, rom.gamma_t) < 0:
        raise ConfigError("[rom] regularization parameters must be non-negative")

    # ecsw --------------------------------------------------------------------
    ecsw_kwargs = {}
    raw = _pop(entries, "ecsw", "tau")
    if raw:
        ecsw_kwargs["tau"] = _as_float(raw, "ecsw", "tau")
        _range_check(0.0 < ecsw_kwargs["tau"] <= 1.0, "[ecsw] tau must lie in (0, 1]", raw)
    raw = _pop(entries, "ecsw", "train_stride")
    if raw:
        ecsw_kwargs["train_stride"] = _as_int(raw, "ecsw", "train_stride")
        _range_check(ecsw_kwargs["train_stride"] >= 1, "[ecsw] train_stride must be >= 1", raw)
    ecsw = EcswSettings(**ecsw_kwargs)

    # predictive ----------------------------------------------------------------
    pred_kwargs = {}
    raw = _pop(entries, "predictive", "deviation_percent")
    if raw:
        pred_kwargs["deviation_percent"] = _as_float(raw, "predictive", "deviation_percent")
        _range_check(0.0 < pred_kwargs["deviation_percent"] < 100.0,
                     "[predictive] deviation_percent must lie in (0, 100)", raw)
    predictive = PredictiveSettings(**pred_kwargs)

    # output ----------------------------------------------------------------
    raw = _pop(entries, "output", "directory")
    output_dir = raw[0] if raw else "out"

    if entries:
        (section, key), (_, line) = next(iter(sorted(entries.items(), key=lambda kv: kv[1][1])))
        raise ConfigError(f"unknown key '{key}' in section [{section}]", line=line)

    return Config(mesh=mesh, material=material, loading=loading, rom=rom,
                  ecsw=ecsw, predictive=predictive, output_dir=output_dir)
