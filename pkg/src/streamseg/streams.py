"""Motion stream (multiscale cascaded bidirectional ConvGRU), appearance
stream and the full-resolution fusion head.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from streamseg import numerics as nx
from streamseg.convgru import CellState, ConvGruCell
from streamseg.errors import ConfigError, ResolutionError, ShapeError
from streamseg.numerics import Parameters, Tensor

FLOW_CHANNELS = 2
RGB_CHANNELS = 3


@dataclass
class ModelConfig:
    num_layers: int = 5
    hidden: list[int] = field(default_factory=lambda: [4, 8, 16, 8, 4])
    kernel_size: int = 7
    motion_out: int = 16
    transpose_kernel: int = 4
    app_widths: list[int] = field(default_factory=lambda: [16, 32, 32, 16])
    app_kernel: int = 3
    leaky_slope: float = 0.1
    streams: list[str] = field(default_factory=lambda: ["motion", "appearance"])

    def __post_init__(self):
        if self.num_layers % 2 != 1 or self.num_layers < 1:
            raise ConfigError(f"num_layers must be odd, got {self.num_layers}")
        if len(self.hidden) != self.num_layers:
            raise ConfigError(f"hidden has {len(self.hidden)} entries for {self.num_layers} layers")
        if len(self.app_widths) != 4:
            raise ConfigError("app_widths needs exactly 4 entries")
        unknown = set(self.streams) - {"motion", "appearance"}
        if unknown or not self.streams:
            raise ConfigError(f"streams must be a non-empty subset of motion/appearance, got {self.streams}")

    @property
    def use_motion(self) -> bool:
        return "motion" in self.streams

    @property
    def use_appearance(self) -> bool:
        return "appearance" in self.streams

    @property
    def fusion_channels(self) -> int:
        c = 0
        if self.use_motion:
            c += 2 * self.motion_out + FLOW_CHANNELS
        if self.use_appearance:
            c += self.app_widths[-1]
        return c

    @property
    def divisor(self) -> int:
        """Input sizes must be multiples of this for the scale ladder."""
        d = 2 ** ((self.num_layers + 1) // 2)
        if self.use_appearance:
            d = max(d, 4)
        return d

    def to_dict(self) -> dict:
        return asdict(self)


StackState = list  # list[CellState], one entry per layer


class MultiScaleStack:
    """Hourglass of ConvGRU cells with skip connections.

    Encoder cells ``1..(L+1)/2`` each halve the resolution; decoder cells
    upsample their input bilinearly by 2 first and concatenate their state
    with the mirror encoder state for the next layer. A stride-2 transposed
    convolution restores the input resolution.
    """

    def __init__(self, params: Parameters, prefix: str, in_channels: int, hidden: Sequence[int],
                 k: int, out_channels: int, transpose_kernel: int = 4,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.L = len(hidden)
        self.mid = (self.L + 1) // 2
        self.hidden = list(hidden)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.cells: list[ConvGruCell] = []
        for l in range(1, self.L + 1):
            if l == 1:
                c_in = in_channels
            elif l <= self.mid + 1:
                c_in = hidden[l - 2]
            else:
                c_in = hidden[l - 2] + hidden[self.L - l + 1]
            stride = 2 if l <= self.mid else 1
            self.cells.append(ConvGruCell(params, f"{prefix}.cell{l}", c_in, hidden[l - 1], k=k,
                                          stride=stride, rng=rng, dtype=dtype))
        c_last = hidden[-1] + hidden[0] if self.L > 1 else hidden[0]
        a = 1.0 / np.sqrt(c_last * transpose_kernel * transpose_kernel)
        self.w_out = params.add(f"{prefix}.out.w", rng.uniform(
            -a, a, size=(c_last, out_channels, transpose_kernel, transpose_kernel)).astype(dtype))
        self.b_out = params.add(f"{prefix}.out.b", np.zeros(out_channels, dtype=dtype))

    def ladder(self) -> list[int]:
        """Downsampling factor of each layer relative to the input."""
        return [2 ** l if l <= self.mid else 2 ** (self.L - l + 1) for l in range(1, self.L + 1)]

    def check_resolution(self, height: int, width: int) -> None:
        div = 2 ** self.mid
        if height % div or width % div:
            raise ResolutionError("multiscale_step", f"input size must be divisible by {div}", (height, width))

    def zero_state(self, n: int, height: int, width: int, dtype=np.float32) -> StackState:
        self.check_resolution(height, width)
        return [CellState(Tensor(np.zeros((n, h, height // f, width // f), dtype=dtype)))
                for h, f in zip(self.hidden, self.ladder())]

    def step(self, x_t: Tensor, prev: StackState) -> tuple[Tensor, StackState]:
        self.check_resolution(*x_t.shape[2:])
        if len(prev) != self.L:
            raise ShapeError("multiscale_step", f"expected {self.L} layer states", (len(prev),))
        states: list[CellState] = [None] * self.L  # type: ignore[list-item]
        x = x_t
        for l in range(1, self.mid + 1):
            states[l - 1] = self.cells[l - 1].step(x, prev[l - 1])
            x = states[l - 1].h
        for l in range(self.mid + 1, self.L + 1):
            x = nx.resize_bilinear(x, 2)
            states[l - 1] = self.cells[l - 1].step(x, prev[l - 1])
            x = nx.concat_channels([states[l - 1].h, states[self.L - l].h])
        o_t = nx.conv2d_transpose(x, self.w_out, self.b_out, stride=2)
        return o_t, states


def multiscale_step(stack: MultiScaleStack, x_t: Tensor, h_prev: StackState) -> tuple[Tensor, StackState]:
    return stack.step(x_t, h_prev)


def detach_state(state: StackState) -> StackState:
    """Copy of the state without any tape history (truncated backprop)."""
    return [CellState(Tensor(s.h.data.copy())) for s in state]


def cascaded_bidirectional(fwd: MultiScaleStack, bwd: MultiScaleStack, flows: Sequence[Tensor],
                           h_in: StackState) -> tuple[list[Tensor], StackState]:
    """Forward stack over the flows, then the backward stack over the reversed
    ``[forward output ; flow]`` sequence, started from the final forward state.

    Returns per-frame ``z_s = [o_s^F ; o_s^B]`` (backward outputs re-aligned to
    frame order) and the final forward state for the next mini-batch.
    """
    flows = list(flows)
    if not flows:
        raise ShapeError("cascaded_bidirectional", "empty flow sequence")
    state = h_in
    outs_f = []
    for f in flows:
        o, state = fwd.step(f, state)
        outs_f.append(o)
    h_out = state
    back_in = [nx.concat_channels([o, f]) for o, f in zip(outs_f, flows)][::-1]
    bstate = h_out
    outs_b = []
    for x in back_in:
        o, bstate = bwd.step(x, bstate)
        outs_b.append(o)
    outs_b = outs_b[::-1]
    z = [nx.concat_channels([of, ob]) for of, ob in zip(outs_f, outs_b)]
    return z, h_out


class AppearanceNet:
    """Stateless per-frame encoder: convs with strides (2, 2, 1, 1) and leaky
    ReLU on all but the last layer, then bilinear x4 back to input size."""

    def __init__(self, params: Parameters, prefix: str, widths: Sequence[int], kernel: int = 3,
                 slope: float = 0.1, rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.strides = (2, 2, 1, 1)
        self.slope = slope
        self.layers = []
        c_in = RGB_CHANNELS
        for i, (c_out, s) in enumerate(zip(widths, self.strides)):
            a = 1.0 / np.sqrt(c_in * kernel * kernel)
            w = params.add(f"{prefix}.conv{i + 1}.w", rng.uniform(-a, a, size=(c_out, c_in, kernel, kernel)).astype(dtype))
            b = params.add(f"{prefix}.conv{i + 1}.b", np.zeros(c_out, dtype=dtype))
            self.layers.append((w, b, s))
            c_in = c_out
        self.out_channels = c_in

    def forward(self, rgb: Tensor) -> Tensor:
        h, w = rgb.shape[2:]
        if h % 4 or w % 4:
            raise ResolutionError("appearance_forward", "resolution must be divisible by 4", (h, w))
        x = rgb
        last = len(self.layers) - 1
        for i, (wt, b, s) in enumerate(self.layers):
            x = nx.conv2d(x, wt, b, stride=s)
            if i < last:
                x = nx.leaky_relu(x, self.slope)
        return nx.resize_bilinear(x, 4)


def appearance_forward(net: AppearanceNet, rgb: Tensor) -> Tensor:
    return net.forward(rgb)


class FusionHead:
    """1x1 convolution over the channel-stacked streams, then sigmoid."""

    def __init__(self, params: Parameters, prefix: str, in_channels: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        a = 1.0 / np.sqrt(in_channels)
        self.in_channels = in_channels
        self.w = params.add(f"{prefix}.w", rng.uniform(-a, a, size=(1, in_channels, 1, 1)).astype(dtype))
        self.b = params.add(f"{prefix}.b", np.zeros(1, dtype=dtype))

    def forward(self, parts: Sequence[Tensor]) -> Tensor:
        ref = parts[0].shape[2:]
        for p in parts:
            if p.shape[2:] != ref:
                raise ResolutionError("fuse_streams", "stream resolutions differ", ref, p.shape[2:])
        x = nx.concat_channels(parts) if len(parts) > 1 else parts[0]
        return nx.sigmoid(nx.conv2d(x, self.w, self.b))


def fuse_streams(head: FusionHead, motion_z: Tensor | None, appearance: Tensor | None,
                 flow: Tensor | None) -> Tensor:
    parts = []
    if motion_z is not None:
        parts.append(motion_z)
    if appearance is not None:
        parts.append(appearance)
    if flow is not None:
        parts.append(flow)
    if not parts:
        raise ShapeError("fuse_streams", "no stream to fuse")
    return head.forward(parts)


class PixelModel:
    """Two-stream network producing the pixel-level foreground map."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.params = Parameters()
        self.forward_stack = self.backward_stack = self.appearance = None
        if cfg.use_motion:
            self.forward_stack = MultiScaleStack(self.params, "motion.fwd", FLOW_CHANNELS, cfg.hidden,
                                                 cfg.kernel_size, cfg.motion_out, cfg.transpose_kernel,
                                                 rng=rng, dtype=dtype)
            self.backward_stack = MultiScaleStack(self.params, "motion.bwd", cfg.motion_out + FLOW_CHANNELS,
                                                  cfg.hidden, cfg.kernel_size, cfg.motion_out,
                                                  cfg.transpose_kernel, rng=rng, dtype=dtype)
        if cfg.use_appearance:
            self.appearance = AppearanceNet(self.params, "appearance", cfg.app_widths, cfg.app_kernel,
                                            cfg.leaky_slope, rng=rng, dtype=dtype)
        self.fusion = FusionHead(self.params, "fusion", cfg.fusion_channels, rng=rng, dtype=dtype)

    def zero_state(self, n: int, height: int, width: int) -> StackState | None:
        if self.forward_stack is None:
            return None
        return self.forward_stack.zero_state(n, height, width, dtype=self.dtype)

    def check_resolution(self, height: int, width: int) -> None:
        d = self.config.divisor
        if height % d or width % d:
            raise ResolutionError("pixel_model", f"frame size must be divisible by {d}", (height, width))

    def forward(self, rgb: Sequence[Tensor], flows: Sequence[Tensor],
                state: StackState | None) -> tuple[Tensor, StackState | None]:
        """Run one mini-batch of T frames.

        ``rgb[t]`` is [N,3,H,W] in [-1,1]; ``flows[t]`` is [N,2,H,W] normalized
        to unit maximum magnitude. Returns the probability maps stacked
        frame-major as [T*N,1,H,W] and the forward motion state to hand to the
        next mini-batch of the same videos.
        """
        t_len = len(rgb)
        if t_len == 0 or len(flows) != t_len:
            raise ShapeError("pixel_model", "rgb and flow sequences must be non-empty and equally long",
                             (len(rgb),), (len(flows),))
        self.check_resolution(*rgb[0].shape[2:])
        parts = []
        new_state = state
        if self.config.use_motion:
            if state is None:
                n, _, h, w = flows[0].shape
                state = self.zero_state(n, h, w)
            z, new_state = cascaded_bidirectional(self.forward_stack, self.backward_stack, flows, state)
            parts.append(nx.concat_frames(z))
        if self.config.use_appearance:
            # frames are independent: the whole mini-batch goes through at once
            parts.append(self.appearance.forward(nx.concat_frames(rgb)))
        if self.config.use_motion:
            parts.append(nx.concat_frames(flows))
        return self.fusion.forward(parts), new_state
