"""
Utils package for the nonlinear Maxwell shape-sensitivity toolkit
Contains configuration, logging, error, quadrature and reporting helpers
"""

# Package metadata
__version__ = '1.0.0'
__author__ = 'Maxwell Shape Sensitivity Toolkit'
