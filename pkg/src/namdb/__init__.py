"""Network-attached-memory database protocols and operators on a simulated RDMA fabric."""

__version__ = "0.1.0"
