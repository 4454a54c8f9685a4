"""Remote forwarding of deep-learning forward passes to an (emulated) accelerator node."""
from .backend import Frame, Heatmap, make_backend, mockpose_forward
from .client import Accelerator, DispatchConfig, connect, load_config
from .server import Server, serve
from .wire import Dims, ModelDescriptor, transfer_size

__version__ = "0.1.0"
