# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

from setuptools import setup

with open("l2sa/_version.py", "r") as f:
    exec(f.read()) # get __version__ variable

with open("README.md", "r") as f:
    long_desc = f.read()

setup(
    name = 'l2sa-engine',
    version = __version__,
    description = 'l2-normalized spatial attention networks for brain tumor MRI classification',
    long_description = long_desc,
    long_description_content_type='text/markdown',
    author = 'The l2sa-engine developers',
    license = 'MIT',
    python_requires='>=3.7',
    packages = ['l2sa'],
    install_requires = ['numpy>=1.20', 'paranoid-scientist>=0.2.3', 'Pillow>=7.0'],
    extras_require = {'test' : ['pytest']},
    entry_points = {'console_scripts' : ['l2sa = l2sa.cli:main']},
    classifiers = [
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Topic :: Scientific/Engineering :: Medical Science Apps.',
        'Topic :: Scientific/Engineering :: Image Recognition']
)
