#!/usr/bin/env python

"""
Install script for the MFT fusion library.
"""

__author__ = "MFT fusion developers"

from setuptools import setup

def read_version():
    try:
        return open('VERSION', 'r').readline().strip()
    except IOError as e:
        raise SystemExit(
            "Error: you must run setup from the root directory (%s)" % str(e))


setup(name="mftfusion",
      version=read_version(),
      description=\
      "A desk-scale multimodal fusion transformer for land-cover mapping",
      long_description="""
mftfusion trains and evaluates a small transformer that classifies the pixels of
a hyperspectral scene, using a co-registered auxiliary raster (LiDAR, SAR, DSM
or multispectral) as the query token of its cross patch attention.

Everything runs on numpy, with a tape-based automatic differentiation that is
verified against finite differences.  A synthetic scene generator makes it
possible to exercise the whole workflow without any external dataset.
""",
      license="GPL",
      author="MFT fusion developers",
      package_dir = {'': 'lib/python'},
      py_modules = ('mfttensor', 'mftextract', 'mfttoken', 'mftencoder',
                    'mftmodel', 'mftdata', 'mftmetrics', 'mfttrain', 'mftcli'),
      install_requires = ['numpy>=1.17', 'scipy'],
      python_requires = '>=3.6',
      entry_points = {'console_scripts': ['mft=mftcli:main']},
     )
