#!/usr/bin/env python3
# -*- coding: utf-8 -*-
#
# vidctl documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import os
import sys
from importlib import metadata

# The package is documented from the source tree.
sys.path.insert(0, os.path.abspath('..'))

# -- General configuration ------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.intersphinx',
    'sphinx.ext.napoleon',
    'sphinx.ext.todo',
    'sphinx.ext.viewcode',
    'sphinxcontrib.autoprogram',
]

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = 'vidctl'
copyright = '2026, vidctl contributors'
author = 'vidctl contributors'

try:
    release = metadata.version('vidctl')
except metadata.PackageNotFoundError:
    release = 'development'
version = release.rsplit('.', 1)[0]

language = 'en'
exclude_patterns = ['_build']
pygments_style = 'sphinx'
todo_include_todos = True

# Heavy runtime dependencies aren't needed to render the API pages.
autodoc_mock_imports = [
    'av',
    'focal_frequency_loss',
    'kornia',
    'matplotlib',
    'torch',
    'torchvision',
]

# -- Options for HTML output ----------------------------------------------

html_theme = 'sphinx_rtd_theme'
htmlhelp_basename = 'vidctldoc'

# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'vidctl', 'vidctl Documentation', [author], 1)
]

intersphinx_mapping = {
    'argh': ('https://argh.readthedocs.io/en/latest/', None),
    'python': ('https://docs.python.org/3', None),
    'torch': ('https://pytorch.org/docs/stable/', None),
}
