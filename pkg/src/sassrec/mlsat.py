"""Global shared tower, per-scenario gated towers and scenario bias fusion.

Shapes: the global tower and every scenario tower share one hidden width
``H``; the scenario auxiliary vector ``a`` also has width ``H``.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import MLP, DenseLayer, Module, ShapeError, StateError, check_dim, sigmoid, uniform_init

GATE_VARIANTS = ("sass_gate", "sigmoid_gate", "production_gate", "simnet_gate", "no_gate")


class ScenarioAuxNet(MLP):
    """Maps the scenario-context embedding to the scenario bias vector ``a``."""

    def __init__(
        self,
        context_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = (16,),
        activations: Sequence[str] | None = None,
    ) -> None:
        dims = [context_dim, *hidden, out_dim]
        if activations is None:
            activations = ["relu"] * len(hidden) + ["tanh"]
        super().__init__(dims, activations, rng)


def scenario_aux_forward(aux: ScenarioAuxNet, x_a: np.ndarray) -> np.ndarray:
    return aux.forward(x_a)


# --- scenario-adaptive gate unit -------------------------------------------


def gate_unit_forward(p: dict[str, np.ndarray], g: np.ndarray, s_prev: np.ndarray, a: np.ndarray):
    """One gate layer. ``p`` holds W_r, W_br, W_h, W_z, W_bz.

    Returns ``(s, cache)``; ``cache`` also exposes the gates r, h, z.
    """
    H = s_prev.shape[-1]
    check_dim("global input to gate", g.shape[-1], H)
    check_dim("W_r columns", p["W_r"].shape[1], 2 * H)
    check_dim("W_br columns", p["W_br"].shape[1], a.shape[-1])
    gs = np.concatenate([g, s_prev], axis=-1)
    r = sigmoid(gs @ p["W_r"].T + a @ p["W_br"].T)
    rg_s = np.concatenate([r * g, s_prev], axis=-1)
    h = np.tanh(rg_s @ p["W_h"].T)
    z = sigmoid(gs @ p["W_z"].T + a @ p["W_bz"].T)
    s = (1.0 - z) * s_prev + z * h
    cache = {"g": g, "s_prev": s_prev, "a": a, "gs": gs, "rg_s": rg_s, "r": r, "h": h, "z": z}
    return s, cache


def gate_unit_backward(p: dict[str, np.ndarray], cache: dict, ds: np.ndarray):
    """Returns ``(param_grads, dg, ds_prev, da)``."""
    g, s_prev, a, z, h, r = cache["g"], cache["s_prev"], cache["a"], cache["z"], cache["h"], cache["r"]
    H = s_prev.shape[-1]
    ds_prev = ds * (1.0 - z)
    dz_pre = ds * (h - s_prev) * z * (1.0 - z)
    dh_pre = ds * z * (1.0 - h * h)
    grads = {
        "W_z": dz_pre.T @ cache["gs"],
        "W_bz": dz_pre.T @ a,
        "W_h": dh_pre.T @ cache["rg_s"],
    }
    dgs = dz_pre @ p["W_z"]
    da = dz_pre @ p["W_bz"]
    d_rg_s = dh_pre @ p["W_h"]
    d_rg = d_rg_s[:, :H]
    ds_prev = ds_prev + d_rg_s[:, H:]
    dg = d_rg * r
    dr_pre = d_rg * g * r * (1.0 - r)
    grads["W_r"] = dr_pre.T @ cache["gs"]
    grads["W_br"] = dr_pre.T @ a
    dgs = dgs + dr_pre @ p["W_r"]
    da = da + dr_pre @ p["W_br"]
    dg = dg + dgs[:, :H]
    ds_prev = ds_prev + dgs[:, H:]
    return grads, dg, ds_prev, da


# --- ablation gates ---------------------------------------------------------


def _blend_input(variant: str, g: np.ndarray, s_prev: np.ndarray) -> np.ndarray:
    if variant == "sigmoid_gate":
        return np.concatenate([s_prev, g], axis=-1)
    return np.concatenate([s_prev * g, s_prev - g, s_prev + g], axis=-1)


def alt_gate_forward(variant: str, g: np.ndarray, s_prev: np.ndarray, p: dict[str, np.ndarray]):
    """Forward for the comparison gates. Returns ``(s, cache)``.

    ``sigmoid_gate`` and ``simnet_gate`` blend the global output with the
    scenario tower's own dense layer ``d = tanh(W_d s_prev + b_d)`` using
    ``w = sigmoid(W_g u + b_g)``, where ``u`` is ``[s_prev, g]`` or
    ``[s_prev*g, s_prev-g, s_prev+g]`` respectively.
    """
    if variant not in GATE_VARIANTS or variant == "sass_gate":
        raise ValueError(f"unknown comparison gate {variant!r}")
    check_dim("global input to gate", g.shape[-1], s_prev.shape[-1])
    if variant == "production_gate":
        return s_prev * g, {"g": g, "s_prev": s_prev}
    d = np.tanh(s_prev @ p["W_d"].T + p["b_d"])
    if variant == "no_gate":
        return d, {"s_prev": s_prev, "d": d}
    u = _blend_input(variant, g, s_prev)
    w = sigmoid(u @ p["W_g"].T + p["b_g"])
    s = w * g + (1.0 - w) * d
    return s, {"g": g, "s_prev": s_prev, "d": d, "u": u, "w": w}


def alt_gate_backward(variant: str, p: dict[str, np.ndarray], cache: dict, ds: np.ndarray):
    """Returns ``(param_grads, dg, ds_prev)``."""
    if variant == "production_gate":
        return {}, ds * cache["s_prev"], ds * cache["g"]
    s_prev, d = cache["s_prev"], cache["d"]
    if variant == "no_gate":
        dd_pre = ds * (1.0 - d * d)
        grads = {"W_d": dd_pre.T @ s_prev, "b_d": dd_pre.sum(axis=0)}
        return grads, np.zeros_like(s_prev), dd_pre @ p["W_d"]
    g, w, u = cache["g"], cache["w"], cache["u"]
    dw_pre = ds * (g - d) * w * (1.0 - w)
    dd_pre = ds * (1.0 - w) * (1.0 - d * d)
    grads = {
        "W_g": dw_pre.T @ u,
        "b_g": dw_pre.sum(axis=0),
        "W_d": dd_pre.T @ s_prev,
        "b_d": dd_pre.sum(axis=0),
    }
    du = dw_pre @ p["W_g"]
    dg = ds * w
    ds_prev = dd_pre @ p["W_d"]
    H = s_prev.shape[-1]
    if variant == "sigmoid_gate":
        ds_prev = ds_prev + du[:, :H]
        dg = dg + du[:, H:]
    else:
        dp, dm, dpl = du[:, :H], du[:, H : 2 * H], du[:, 2 * H :]
        ds_prev = ds_prev + dp * g + dm + dpl
        dg = dg + dp * s_prev - dm + dpl
    return grads, dg, ds_prev


# --- bias fusion ------------------------------------------------------------


def bias_fusion(W_o: np.ndarray, s: np.ndarray, a: np.ndarray):
    """``alpha = sigmoid(W_o [s, a])`` (one scalar per row); ``e = alpha*s + (1-alpha)*a``.

    Returns ``(e, cache)``.
    """
    if s.shape != a.shape:
        raise ShapeError(f"fusion inputs differ: s {s.shape} vs a {a.shape}")
    check_dim("W_o columns", W_o.shape[-1], 2 * s.shape[-1])
    sa = np.concatenate([s, a], axis=-1)
    alpha = sigmoid(sa @ W_o.reshape(1, -1).T)
    e = alpha * s + (1.0 - alpha) * a
    return e, {"s": s, "a": a, "sa": sa, "alpha": alpha}


def bias_fusion_backward(W_o: np.ndarray, cache: dict, de: np.ndarray):
    """Returns ``(dW_o, ds, da)``."""
    s, a, alpha = cache["s"], cache["a"], cache["alpha"]
    dpre = (de * (s - a)).sum(axis=-1, keepdims=True) * alpha * (1.0 - alpha)
    dW_o = (dpre.T @ cache["sa"]).reshape(W_o.shape)
    dsa = dpre @ W_o.reshape(1, -1)
    H = s.shape[-1]
    return dW_o, de * alpha + dsa[:, :H], de * (1.0 - alpha) + dsa[:, H:]


# --- towers -----------------------------------------------------------------


class ScenarioTower(Module):
    """One scenario's tower: input projection ``s_0`` then ``depth`` gate layers.

    For the SASS gate, W_r/W_h/W_z are per layer while W_br/W_bz are shared
    by all layers of the tower.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: int,
        aux_dim: int,
        depth: int,
        gate: str,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        if gate not in GATE_VARIANTS:
            raise ValueError(f"unknown gate variant {gate!r}")
        if depth < 1:
            raise ValueError("depth must be at least 1")
        self.gate = gate
        self.depth = depth
        self.input_proj = DenseLayer(in_dim, hidden, "tanh", rng)
        H = hidden
        if gate == "sass_gate":
            self.params["W_br"] = uniform_init(rng, (H, aux_dim), aux_dim)
            self.params["W_bz"] = uniform_init(rng, (H, aux_dim), aux_dim)
            for l in range(depth):
                for name in ("W_r", "W_h", "W_z"):
                    self.params[f"{name}{l}"] = uniform_init(rng, (H, 2 * H), 2 * H)
        elif gate != "production_gate":
            for l in range(depth):
                self.params[f"W_d{l}"] = uniform_init(rng, (H, H), H)
                self.params[f"b_d{l}"] = uniform_init(rng, (H,), H)
                if gate != "no_gate":
                    width = 2 * H if gate == "sigmoid_gate" else 3 * H
                    self.params[f"W_g{l}"] = uniform_init(rng, (H, width), width)
                    self.params[f"b_g{l}"] = uniform_init(rng, (H,), width)
        self._caches: list | None = None

    def children(self) -> dict[str, Module]:
        return {"input_proj": self.input_proj}

    def layer_params(self, l: int) -> dict[str, np.ndarray]:
        if self.gate == "sass_gate":
            return {
                "W_r": self.params[f"W_r{l}"],
                "W_h": self.params[f"W_h{l}"],
                "W_z": self.params[f"W_z{l}"],
                "W_br": self.params["W_br"],
                "W_bz": self.params["W_bz"],
            }
        return {n: self.params[f"{n}{l}"] for n in ("W_d", "b_d", "W_g", "b_g") if f"{n}{l}" in self.params}

    def forward(self, x: np.ndarray, g_layers: Sequence[np.ndarray], a: np.ndarray) -> np.ndarray:
        if len(g_layers) != self.depth:
            raise ShapeError(f"expected {self.depth} global layer outputs, got {len(g_layers)}")
        s = self.input_proj.forward(x)
        caches = []
        for l in range(self.depth):
            p = self.layer_params(l)
            if self.gate == "sass_gate":
                s, c = gate_unit_forward(p, g_layers[l], s, a)
            else:
                s, c = alt_gate_forward(self.gate, g_layers[l], s, p)
            caches.append(c)
        self._caches = caches
        return s

    def backward(self, ds: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
        """Returns ``(dx, d_g_layers, da)``."""
        if self._caches is None:
            raise StateError("ScenarioTower.backward called before forward")
        dgs: list[np.ndarray] = [None] * self.depth  # type: ignore[list-item]
        da = np.zeros_like(self._caches[0]["a"]) if self.gate == "sass_gate" else None
        for l in reversed(range(self.depth)):
            p = self.layer_params(l)
            if self.gate == "sass_gate":
                grads, dg, ds, da_l = gate_unit_backward(p, self._caches[l], ds)
                da = da + da_l
                for name in ("W_r", "W_h", "W_z"):
                    self._accumulate(f"{name}{l}", grads[name])
                self._accumulate("W_br", grads["W_br"])
                self._accumulate("W_bz", grads["W_bz"])
            else:
                grads, dg, ds = alt_gate_backward(self.gate, p, self._caches[l], ds)
                for name, value in grads.items():
                    self._accumulate(f"{name}{l}", value)
            dgs[l] = dg
        dx = self.input_proj.backward(ds)
        return dx, dgs, da


class MLSAT(Module):
    """One side (user or item) of the model.

    ``forward(x, scenario, x_a)`` returns ``(e_s, g_T)``: the fused
    scenario-specific vector and the global tower output.
    """

    def __init__(
        self,
        in_dim: int,
        context_dim: int,
        hidden: int,
        depth: int,
        n_scenarios: int,
        rng: np.random.Generator,
        gate: str = "sass_gate",
        use_fusion: bool = True,
        aux_hidden: Sequence[int] = (16,),
        global_activation: str = "tanh",
    ) -> None:
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be at least 1")
        self.in_dim = in_dim
        self.hidden = hidden
        self.depth = depth
        self.n_scenarios = n_scenarios
        self.gate = gate
        self.use_fusion = use_fusion
        self.aux = ScenarioAuxNet(context_dim, hidden, rng, hidden=aux_hidden)
        self.global_layers = [
            DenseLayer(in_dim if l == 0 else hidden, hidden, global_activation, rng) for l in range(depth)
        ]
        self.towers = [ScenarioTower(in_dim, hidden, hidden, depth, gate, rng) for _ in range(n_scenarios)]
        if use_fusion:
            self.params["W_o"] = uniform_init(rng, (1, 2 * hidden), 2 * hidden)
        self._cache = None

    def children(self) -> dict[str, Module]:
        out: dict[str, Module] = {"aux": self.aux}
        out.update({f"global{l}": layer for l, layer in enumerate(self.global_layers)})
        out.update({f"scenario{s}": t for s, t in enumerate(self.towers)})
        return out

    def forward(self, x: np.ndarray, scenario: np.ndarray, x_a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        scenario = np.asarray(scenario)
        check_dim("tower input", x.shape[-1], self.in_dim)
        if scenario.size and (scenario.min() < 0 or scenario.max() >= self.n_scenarios):
            bad = scenario[(scenario < 0) | (scenario >= self.n_scenarios)][0]
            raise KeyError(f"unknown scenario id {bad}")
        a = self.aux.forward(x_a)
        g_layers = []
        g = x
        for layer in self.global_layers:
            g = layer.forward(g)
            g_layers.append(g)
        s_T = np.zeros((len(x), self.hidden))
        groups = []
        for sid in np.unique(scenario):
            idx = np.nonzero(scenario == sid)[0]
            s_T[idx] = self.towers[sid].forward(x[idx], [gl[idx] for gl in g_layers], a[idx])
            groups.append((int(sid), idx))
        if self.use_fusion:
            e, fcache = bias_fusion(self.params["W_o"], s_T, a)
        else:
            e, fcache = s_T, None
        self._cache = {"groups": groups, "fusion": fcache, "a_shape": a.shape, "n": len(x)}
        self.last_s_T = s_T
        self._cache_g_T = g_layers[-1]
        return e, g_layers[-1]

    def backward(self, d_e: np.ndarray, d_g: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Returns ``(dx, dx_a)``."""
        if self._cache is None:
            raise StateError("MLSAT.backward called before forward")
        c = self._cache
        if self.use_fusion:
            dW_o, ds_T, da = bias_fusion_backward(self.params["W_o"], c["fusion"], d_e)
            self._accumulate("W_o", dW_o)
        else:
            ds_T, da = d_e, np.zeros(c["a_shape"])
        dx = np.zeros((c["n"], self.in_dim))
        dg_layers = [np.zeros((c["n"], self.hidden)) for _ in range(self.depth)]
        if d_g is not None:
            dg_layers[-1] += d_g
        for sid, idx in c["groups"]:
            dx_s, dgs, da_s = self.towers[sid].backward(ds_T[idx])
            dx[idx] += dx_s
            for l in range(self.depth):
                dg_layers[l][idx] += dgs[l]
            if da_s is not None:
                da[idx] += da_s
        carry = np.zeros((c["n"], self.hidden))
        for l in reversed(range(self.depth)):
            carry = self.global_layers[l].backward(dg_layers[l] + carry)
        dx += carry
        dx_a = self.aux.backward(da)
        return dx, dx_a


def ml_sat_forward(tower: MLSAT, scenario_id: int, base_input: np.ndarray, x_a: np.ndarray):
    """Single example through one side; returns ``(s_T, g_T)`` before fusion."""
    tower.forward(np.atleast_2d(base_input), np.array([scenario_id]), np.atleast_2d(x_a))
    return tower.last_s_T[0], tower._cache_g_T[0]
