# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""Network descriptions, builders and evaluation.

A network is described by a LayerGraph: an ordered list of Layers plus
the multiplicative skip connections between attention sites.  The
graph is pure data; parameter values live in a Parameters registry
keyed "<layer>.weight" and "<layer>.bias", and forward() interprets
the graph on a Tape.

All backbones are three stages of conv -> ReLU -> [attention] ->
maxpool followed by the classifier head flatten -> dense -> ReLU ->
dense.
"""

__all__ = ['Layer', 'Skip', 'LayerGraph', 'build_baseline', 'build_l2sa',
           'build_baseline_cbam', 'build_vgg16_star', 'build_model', 'MODELS',
           'PUBLISHED_COUNTS', 'count_parameters', 'parameter_table',
           'init_parameters', 'zero_parameters', 'forward', 'predict',
           'graph_diff']

import json
import inspect
import logging
from collections import OrderedDict

import numpy as np
from paranoid.decorators import accepts, returns, ensures, paranoidclass, paranoidconfig
from paranoid.types import (Self, String, Natural0, Natural1, Set, Dict, List,
                            Tuple, Maybe, Boolean, Integer, Unchecked)

from . import ops
from .autodiff import Tape, Parameters, Variable
from .attention import attention_parameter_shapes, apply_attention, ATTENTION_KINDS
from .kernels import ConvSpec, conv_output_size, softmax
from .exceptions import GraphError, ConfigError, ShapeError, PreconditionError
from .settings import Settings

logger = logging.getLogger(__name__)

LAYER_KINDS = ("conv", "relu", "maxpool", "attention", "flatten", "dense")

# Published parameter counts.  The l2-SAB + CNN hybrid is context
# only; its backbone is not built here.
PUBLISHED_COUNTS = OrderedDict([
    ("baseline", 4003011),
    ("baseline_cbam", 5474547),
    ("l2sa", 7293523),
    ("vgg16_star", 25972491),
    ("l2sab_cnn", 2199811)])

@paranoidclass
class Layer:
    """One step of a network.

    `attrs` depends on `kind`:

      - conv: in_channels, out_channels, kernel, stride, padding
      - maxpool: window, stride (each a [height, width] pair)
      - attention: block (one of ATTENTION_KINDS), kernel
      - dense: in_features, out_features
      - relu, flatten: none
    """
    @accepts(Self, Set(list(LAYER_KINDS)), String, Maybe(Dict(String, Unchecked())))
    def __init__(self, kind, name, attrs=None):
        self.kind = kind
        self.name = name
        self.attrs = dict(attrs or {})
    @staticmethod
    def _test(v):
        assert v.kind in LAYER_KINDS, "Invalid layer kind"
        assert isinstance(v.name, str) and v.name != "", "Invalid layer name"
        assert isinstance(v.attrs, dict)
    @staticmethod
    def _generate():
        yield Layer("relu", "relu1")
        yield Layer("conv", "conv1", ConvSpec(3, 4, 3).to_dict())
        yield Layer("attention", "sab1", {"block" : "l2sab", "kernel" : 3})
        yield Layer("maxpool", "pool1", {"window" : [2, 2], "stride" : [2, 2]})
    def conv_spec(self):
        return ConvSpec(**self.attrs)
    def parameter_shapes(self):
        """Shapes of this layer's parameter slots, keyed by full name."""
        if self.kind == "conv":
            shapes = {"weight" : self.conv_spec().weight_shape(),
                      "bias" : (self.attrs["out_channels"],)}
        elif self.kind == "dense":
            shapes = {"weight" : (self.attrs["in_features"], self.attrs["out_features"]),
                      "bias" : (self.attrs["out_features"],)}
        elif self.kind == "attention":
            shapes = attention_parameter_shapes(self.attrs["block"], self.attrs["kernel"])
        else:
            shapes = {}
        return OrderedDict((self.name + "." + k, shapes[k])
                           for k in ("weight", "bias") if k in shapes)
    def to_dict(self):
        return {"kind" : self.kind, "name" : self.name, "attrs" : self.attrs}
    def __eq__(self, other):
        return isinstance(other, Layer) and self.to_dict() == other.to_dict()
    def __repr__(self):
        return "Layer(%r, %r, %r)" % (self.kind, self.name, self.attrs)

@paranoidclass
class Skip:
    """A multiplicative skip connection: the attention map of layer
    `source`, average-pooled to the destination's size, multiplies the
    attention map of layer `destination` before it gates."""
    @accepts(Self, String, String, Set(["multiplicative"]))
    def __init__(self, source, destination, mode="multiplicative"):
        self.source = source
        self.destination = destination
        self.mode = mode
    @staticmethod
    def _test(v):
        assert isinstance(v.source, str) and isinstance(v.destination, str)
        assert v.mode == "multiplicative"
    @staticmethod
    def _generate():
        yield Skip("sab1", "sab2")
    def to_dict(self):
        return {"source" : self.source, "destination" : self.destination, "mode" : self.mode}
    def __eq__(self, other):
        return isinstance(other, Skip) and self.to_dict() == other.to_dict()
    def __repr__(self):
        return "Skip(%r, %r)" % (self.source, self.destination)

@paranoidclass
class LayerGraph:
    """An ordered network description.

    `input_shape` is (channels, height, width).  Construction checks
    that layer names are unique, that every skip runs forward between
    two attention layers, and that every layer's input shape can be
    inferred.  Any inconsistency raises GraphError.
    """
    @accepts(Self, String, Tuple(Natural1, Natural1, Natural1), List(Layer), Maybe(List(Skip)), Natural1)
    def __init__(self, name, input_shape, layers, skips=None, class_count=3):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.layers = list(layers)
        self.skips = list(skips or [])
        self.class_count = class_count
        self._validate()
    @staticmethod
    def _test(v):
        assert isinstance(v.name, str)
        assert len(v.input_shape) == 3
        assert all(isinstance(l, Layer) for l in v.layers)
        assert all(isinstance(s, Skip) for s in v.skips)
        Natural1().test(v.class_count)
    @staticmethod
    def _generate():
        yield build_baseline((1, 16, 16), 3, channels=(2, 2, 2), kernels=(3, 3, 3), head=4)
        yield build_l2sa((1, 16, 16), 3, sab_kernels=[3, 3, 3], channels=(2, 2, 2),
                         kernels=(3, 3, 3), head=4)
    def _validate(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise GraphError("%s: duplicate layer names" % self.name)
        position = {n : i for i,n in enumerate(names)}
        for s in self.skips:
            for end in (s.source, s.destination):
                if end not in position or self.layers[position[end]].kind != "attention":
                    raise GraphError("%s: skip endpoint %s is not an attention layer" % (self.name, end))
            if position[s.source] >= position[s.destination]:
                raise GraphError("%s: skip %s -> %s does not run forward" %
                                 (self.name, s.source, s.destination))
        shapes = self.infer_shapes()
        if shapes and shapes[-1][1] != (self.class_count,):
            raise GraphError("%s: output shape %s does not match %i classes" %
                             (self.name, shapes[-1][1], self.class_count))
        for s in self.skips:
            src, dst = dict(shapes)[s.source], dict(shapes)[s.destination]
            if src[1] % dst[1] or src[2] % dst[2] or src[1]//dst[1] != src[2]//dst[2]:
                m = self.pooling_factor(s.destination)
                raise GraphError("%s: skip %s -> %s cannot pool %s to %s; the input height "
                                 "and width must be divisible by %i (for example %i)" %
                                 (self.name, s.source, s.destination, src[1:], dst[1:], m,
                                  m*max(1, -(-self.input_shape[1]//m))))
    def pooling_factor(self, name):
        """Product of the pooling strides before layer `name`."""
        factor = 1
        for l in self.layers:
            if l.name == name:
                break
            if l.kind == "maxpool":
                factor *= l.attrs["stride"][0]
        return factor
    def infer_shapes(self):
        """Per-sample output shape of every layer, as (name, shape)
        pairs, derived without running the network."""
        shape = self.input_shape
        result = []
        for l in self.layers:
            a = l.attrs
            if l.kind == "conv":
                if len(shape) != 3 or shape[0] != a["in_channels"]:
                    raise GraphError("%s: expects %i input channels, got shape %s" %
                                     (l.name, a["in_channels"], shape))
                try:
                    h, _ = conv_output_size(shape[1], a["kernel"], a.get("stride", 1), a.get("padding", "same"))
                    w, _ = conv_output_size(shape[2], a["kernel"], a.get("stride", 1), a.get("padding", "same"))
                except ShapeError as e:
                    raise GraphError("%s: %s" % (l.name, e))
                shape = (a["out_channels"], h, w)
            elif l.kind == "maxpool":
                (wh, ww), (sh, sw) = a["window"], a["stride"]
                if len(shape) != 3 or shape[1] < wh or shape[2] < ww:
                    raise GraphError("%s: window %s larger than input %s" % (l.name, a["window"], shape))
                shape = (shape[0], (shape[1] - wh)//sh + 1, (shape[2] - ww)//sw + 1)
            elif l.kind == "attention":
                if len(shape) != 3:
                    raise GraphError("%s: attention needs a feature map, got %s" % (l.name, shape))
                if a["block"] not in ATTENTION_KINDS or a["block"] == "none":
                    raise GraphError("%s: invalid attention block %s" % (l.name, a["block"]))
            elif l.kind == "flatten":
                shape = (int(np.prod(shape)),)
            elif l.kind == "dense":
                if shape != (a["in_features"],):
                    raise GraphError("%s: expects %i features, got shape %s" %
                                     (l.name, a["in_features"], shape))
                shape = (a["out_features"],)
            result.append((l.name, shape))
        return result
    def output_shape(self):
        return self.infer_shapes()[-1][1] if self.layers else self.input_shape
    def parameter_shapes(self):
        """Ordered mapping of parameter slot names to shapes."""
        shapes = OrderedDict()
        for l in self.layers:
            shapes.update(l.parameter_shapes())
        return shapes
    def attention_layers(self):
        return [l for l in self.layers if l.kind == "attention"]
    def skips_into(self, name):
        return [s for s in self.skips if s.destination == name]
    def to_dict(self):
        return {"name" : self.name, "input_shape" : list(self.input_shape),
                "class_count" : self.class_count,
                "layers" : [l.to_dict() for l in self.layers],
                "skips" : [s.to_dict() for s in self.skips]}
    def to_text(self):
        """Canonical JSON description, as stored in checkpoints."""
        return json.dumps(self.to_dict(), sort_keys=True)
    @staticmethod
    def from_text(text):
        try:
            d = json.loads(text)
            return LayerGraph(d["name"], tuple(d["input_shape"]),
                              [Layer(l["kind"], l["name"], l["attrs"]) for l in d["layers"]],
                              [Skip(s["source"], s["destination"], s["mode"]) for s in d["skips"]],
                              d["class_count"])
        except (ValueError, KeyError, TypeError) as e:
            raise GraphError("Invalid graph description: %s" % e)
    def __eq__(self, other):
        return isinstance(other, LayerGraph) and self.to_dict() == other.to_dict()
    def __repr__(self):
        return "LayerGraph(%r, %i layers, %i skips)" % (self.name, len(self.layers), len(self.skips))

def _stage_layers(i, in_channels, out_channels, kernel, pool, attention=None, attention_kernel=None):
    """conv -> ReLU -> [attention] -> maxpool for backbone stage i."""
    layers = [Layer("conv", "conv%i" % i, ConvSpec(in_channels, out_channels, kernel).to_dict()),
              Layer("relu", "relu%i" % i)]
    if attention not in (None, "none"):
        prefix = "cbam" if attention == "cbam_spatial" else "sab"
        layers.append(Layer("attention", "%s%i" % (prefix, i),
                            {"block" : attention, "kernel" : attention_kernel}))
    layers.append(Layer("maxpool", "pool%i" % i, {"window" : [pool, pool], "stride" : [pool, pool]}))
    return layers

def _head(features, classes, head):
    return [Layer("flatten", "flatten"),
            Layer("dense", "fc1", {"in_features" : features, "out_features" : head}),
            Layer("relu", "relu_fc1"),
            Layer("dense", "fc2", {"in_features" : head, "out_features" : classes})]

def _backbone(name, input_shape, classes, channels, kernels, pools, head,
              attention=None, attention_kernels=None, skips=()):
    if not (len(channels) == len(kernels) == len(pools)):
        raise GraphError("%s: channels, kernels and pools must have equal length" % name)
    if attention_kernels is not None and len(attention_kernels) != len(channels):
        raise GraphError("%s: %i attention kernels given for %i attention sites" %
                         (name, len(attention_kernels), len(channels)))
    layers = []
    c, h, w = input_shape
    for i in range(len(channels)):
        layers += _stage_layers(i + 1, c, channels[i], kernels[i], pools[i], attention,
                                attention_kernels[i] if attention_kernels else None)
        c, h, w = channels[i], h//pools[i], w//pools[i]
    layers += _head(c*h*w, classes, head)
    return LayerGraph(name, tuple(input_shape), layers, list(skips), classes)

_InputShape = Tuple(Natural1, Natural1, Natural1)
_Triple = Tuple(Natural1, Natural1, Natural1)

@accepts(_InputShape, Natural1, _Triple, _Triple, _Triple, Natural1)
@returns(LayerGraph)
@ensures("return.output_shape() == (classes,)")
@paranoidconfig(unit_test=False)
def build_baseline(input_shape=(3, 256, 256), classes=3, channels=(64, 128, 256),
                   kernels=(25, 13, 9), pools=(4, 2, 2), head=256):
    """The shallow backbone: three conv/ReLU/maxpool stages with kernels
    decreasing and channels increasing with depth."""
    return _backbone("baseline", input_shape, classes, channels, kernels, pools, head)

@accepts(_InputShape, Natural1, Maybe(List(Natural1)), Boolean, _Triple, _Triple, _Triple, Natural1, Boolean)
@returns(LayerGraph)
@ensures("len(return.attention_layers()) == 3")
@ensures("skips_enabled <--> len(return.skips) == 3")
@paranoidconfig(unit_test=False)
def build_l2sa(input_shape=(3, 256, 256), classes=3, sab_kernels=None,
               skips_enabled=True, channels=(64, 128, 256), kernels=(25, 13, 9),
               pools=(4, 2, 2), head=256, normalize=True):
    """The baseline with an l2-SAB after the ReLU of each stage.

    With `skips_enabled`, skip A carries the stage 1 map to stage 2,
    B the stage 2 map to stage 3 and C the stage 1 map to stage 3.
    `sab_kernels` defaults to the backbone kernels.
    `normalize=False` uses the block without its l2 layers.
    """
    kind = "l2sab" if normalize else "l2sab_unnormalized"
    skips = [Skip("sab1", "sab2"), Skip("sab2", "sab3"), Skip("sab1", "sab3")] \
        if skips_enabled else []
    name = "l2sa" if skips_enabled else "l2sa_noskip"
    if not normalize:
        name = "l2sa_nonorm"
    return _backbone(name, input_shape, classes, channels, kernels, pools, head,
                     kind, list(sab_kernels or kernels), skips)

@accepts(_InputShape, Natural1, Natural1, _Triple, _Triple, _Triple, Natural1)
@returns(LayerGraph)
@ensures("return.output_shape() == (classes,)")
@paranoidconfig(unit_test=False)
def build_baseline_cbam(input_shape=(3, 256, 256), classes=3, K=7,
                        channels=(64, 128, 256), kernels=(25, 13, 9),
                        pools=(4, 2, 2), head=256):
    """The baseline with a CBAM spatial attention block in each stage."""
    return _backbone("baseline_cbam", input_shape, classes, channels, kernels, pools,
                     head, "cbam_spatial", [K]*len(channels))

@accepts(_InputShape, Natural1, _Triple, _Triple, _Triple, Natural1)
@returns(LayerGraph)
@ensures("return.output_shape() == (classes,)")
@paranoidconfig(unit_test=False)
def build_vgg16_star(input_shape=(3, 256, 256), classes=3, channels=(8, 16, 32),
                     kernels=(3, 3, 3), pools=(2, 2, 2), head=256):
    """A small VGG-style network trained from scratch: three blocks of
    two conv/ReLU pairs, each block followed by a maxpool."""
    layers = []
    c, h, w = input_shape
    for i in range(3):
        for j in (1, 2):
            layers += [Layer("conv", "conv%i_%i" % (i + 1, j),
                             ConvSpec(c, channels[i], kernels[i]).to_dict()),
                       Layer("relu", "relu%i_%i" % (i + 1, j))]
            c = channels[i]
        layers.append(Layer("maxpool", "pool%i" % (i + 1),
                            {"window" : [pools[i], pools[i]], "stride" : [pools[i], pools[i]]}))
        h, w = h//pools[i], w//pools[i]
    layers += _head(c*h*w, classes, head)
    return LayerGraph("vgg16_star", tuple(input_shape), layers, [], classes)

def _l2sa_noskip(**kwargs):
    return build_l2sa(skips_enabled=False, **kwargs)

def _l2sa_nonorm(**kwargs):
    return build_l2sa(normalize=False, **kwargs)

MODELS = OrderedDict([
    ("baseline", build_baseline),
    ("l2sa", build_l2sa),
    ("l2sa_noskip", _l2sa_noskip),
    ("l2sa_nonorm", _l2sa_nonorm),
    ("baseline_cbam", build_baseline_cbam),
    ("vgg16_star", build_vgg16_star)])

def build_model(name, **options):
    """Build a registered model by name.

    Options the chosen builder does not take (for example `sab_kernels`
    for the baseline) are ignored, and options given as None keep the
    builder's default.
    """
    if name not in MODELS:
        raise ConfigError("Unknown model %s, expected one of %s" % (name, ", ".join(MODELS)))
    builder = MODELS[name]
    accepted = inspect.signature(build_l2sa if builder in (_l2sa_noskip, _l2sa_nonorm) else builder).parameters
    kwargs = {}
    for k,v in options.items():
        if v is None:
            continue
        if k not in accepted or (builder is _l2sa_noskip and k == "skips_enabled") \
                or (builder is _l2sa_nonorm and k == "normalize"):
            logger.debug("Model %s ignores option %s" % (name, k))
            continue
        if k == "sab_kernels":
            v = list(v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return builder(**kwargs)

@accepts(LayerGraph)
@returns(Natural0)
def count_parameters(graph):
    """Exact number of scalar weights and biases."""
    return int(sum(int(np.prod(s)) for s in graph.parameter_shapes().values()))

@accepts(Maybe(_InputShape), Natural1)
@returns(List(Tuple(String, Natural0, Natural0, Integer)))
@paranoidconfig(unit_test=False)
def parameter_table(input_shape=None, classes=3):
    """(model, parameters, published parameters, difference) for every
    model with a published count."""
    rows = []
    for name in ("baseline", "baseline_cbam", "l2sa", "vgg16_star"):
        n = count_parameters(build_model(name, input_shape=input_shape, classes=classes))
        rows.append((name, n, PUBLISHED_COUNTS[name], n - PUBLISHED_COUNTS[name]))
    return rows

def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = np.sqrt(6/(fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)

@accepts(LayerGraph, Integer)
@returns(Unchecked(Parameters))
def init_parameters(graph, seed=0):
    """Glorot uniform weights drawn from a generator seeded with `seed`,
    zero biases, in the element type of the `precision` setting."""
    rng = np.random.default_rng(seed)
    dtype = Settings.dtype()
    params = Parameters()
    for name, shape in graph.parameter_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        elif len(shape) == 4:
            field = shape[2]*shape[3]
            params[name] = _glorot(rng, shape, shape[1]*field, shape[0]*field, dtype)
        else:
            params[name] = _glorot(rng, shape, shape[0], shape[1], dtype)
    return params

@accepts(LayerGraph)
@returns(Unchecked(Parameters))
def zero_parameters(graph):
    dtype = Settings.dtype()
    return Parameters({k : np.zeros(s, dtype=dtype) for k,s in graph.parameter_shapes().items()})

def _check_parameters(graph, params):
    for name, shape in graph.parameter_shapes().items():
        if name not in params:
            raise PreconditionError("Missing parameter %s" % name)
        if params[name].shape != tuple(shape):
            raise ShapeError("forward", name, tuple(shape), params[name].shape)

def forward(graph, params, x, tape=None):
    """Logits of `graph` on the batch `x`, shape (B,) + input_shape.

    The computation is recorded on `tape` if given (it must hold
    `params`); otherwise a non-recording tape is used.  Returns the
    logits Variable.
    """
    if tape is None:
        tape = Tape(params, record=False)
    _check_parameters(graph, tape.params)
    value = x.value if isinstance(x, Variable) else x
    if value.ndim != 4 or value.shape[1:] != graph.input_shape:
        raise ShapeError(graph.name, "input", ("B",) + graph.input_shape, value.shape)
    h = x if isinstance(x, Variable) else tape.constant(np.asarray(x, dtype=Settings.dtype()))
    maps = {}
    for l in graph.layers:
        if l.kind == "conv":
            h = ops.conv2d(h, tape.parameter(l.name + ".weight"), tape.parameter(l.name + ".bias"), l.conv_spec())
        elif l.kind == "relu":
            h = ops.relu(h)
        elif l.kind == "maxpool":
            h = ops.maxpool2d(h, tuple(l.attrs["window"]), tuple(l.attrs["stride"]))
        elif l.kind == "attention":
            gate = apply_attention(l.attrs["block"], h, l.attrs["kernel"],
                                   {"weight" : tape.parameter(l.name + ".weight"),
                                    "bias" : tape.parameter(l.name + ".bias")})
            maps[l.name] = gate
            for s in graph.skips_into(l.name):
                routed = maps[s.source]
                factor = routed.shape[2] // gate.shape[2]
                if factor > 1:
                    routed = ops.avgpool2d(routed, factor)
                gate = ops.multiply(gate, routed)
            h = ops.multiply(gate, h)
        elif l.kind == "flatten":
            h = ops.flatten(h)
        elif l.kind == "dense":
            h = ops.dense(h, tape.parameter(l.name + ".weight"), tape.parameter(l.name + ".bias"))
    return h

@accepts(LayerGraph, Unchecked(Parameters), Unchecked(np.ndarray), Natural1)
@returns(Unchecked(np.ndarray))
@ensures("return.shape == (x.shape[0], graph.class_count)")
@ensures("np.allclose(return.sum(axis=1), 1, atol=1e-5)")
def predict(graph, params, x, batch_size=64):
    """Class probabilities for every row of `x`, computed in batches
    without recording."""
    out = []
    for i in range(0, len(x), batch_size):
        logits = forward(graph, params, x[i:i + batch_size])
        out.append(softmax(logits.value))
    return np.concatenate(out, axis=0)

@accepts(LayerGraph, LayerGraph)
@returns(List(Tuple(Set(["+", "-", "~"]), String)))
def graph_diff(a, b):
    """Layers and skips added (+), removed (-) or changed (~) going
    from graph `a` to graph `b`, matched by name."""
    la = OrderedDict((l.name, l) for l in a.layers)
    lb = OrderedDict((l.name, l) for l in b.layers)
    diff = [("-", n) for n in la if n not in lb]
    diff += [("+", n) for n in lb if n not in la]
    diff += [("~", n) for n in la if n in lb and la[n] != lb[n]]
    sa = ["%s->%s" % (s.source, s.destination) for s in a.skips]
    sb = ["%s->%s" % (s.source, s.destination) for s in b.skips]
    diff += [("-", s) for s in sa if s not in sb]
    diff += [("+", s) for s in sb if s not in sa]
    return diff
