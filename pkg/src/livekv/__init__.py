"""A small key-value server that can be patched while it runs."""
from .client import Client
from .server import Server, ServerConfig

__all__ = ["Client", "Server", "ServerConfig"]
__version__ = "0.1.0"
