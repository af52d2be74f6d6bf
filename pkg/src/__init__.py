# PVLR desk-scale multi-label recognition head
# Main package initialization
__version__ = "0.1.0"
