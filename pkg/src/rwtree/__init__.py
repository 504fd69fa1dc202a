"""Random walks in random environment on Galton-Watson trees and forests."""

__version__ = "0.1.0"
