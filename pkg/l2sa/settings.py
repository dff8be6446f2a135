# Copyright 2023 The l2sa-engine developers
#
# This file is part of l2sa-engine, and is available under the MIT
# license.  Please see LICENSE.txt in the root directory for more
# information.

"""A settings manager for l2sa-engine.  This manages settings at a
global level.

As with the verification library we build on, this is a class which
cannot be instantiated, and thus has a single state.  Keeping it in a
class rather than at the module level prevents an "import *" statement
from shadowing the values.
"""

import logging
from contextlib import contextmanager

import numpy as np
from paranoid.settings import Settings as _ParanoidSettings

_DTYPES = {'f32': np.float32, 'f64': np.float64}

class Settings:
    """A settings manager for l2sa-engine

    Change a setting with Settings.set(), read it with Settings.get().
    Settings.override() changes settings for the duration of a with
    block, which is how gradient checks force 64-bit arithmetic.

    Note that this "class" is a singleton namespace with exclusively
    static methods.  It should not be instantiated.
    """

    # Default values for settings.  Each setting must be listed here.
    #
    # Do NOT change them here.  Call Settings.set() at the top of your
    # script instead.
    __global_setting_values = {
        'precision' : 'f32',
        'verify' : True,
        'l2_epsilon' : 1e-12,
        'workers' : 1,
        'log_level' : 'WARNING'}
    # Validity functions, one per setting.
    __validate_settings = {
        'precision' : lambda x : x in _DTYPES.keys(),
        'verify' : lambda x : x in [True, False],
        'l2_epsilon' : lambda x : type(x) in [int, float] and x > 0,
        'workers' : lambda x : isinstance(x, int) and not isinstance(x, bool) and x >= 1,
        'log_level' : lambda x : x in ['DEBUG', 'INFO', 'WARNING', 'ERROR']}
    def __init__(self):
        """Do not try to instantiate this."""
        raise TypeError("Do not instantiate the settings module")
    def set(**kwargs):
        """Set configuration parameters.

        Pass keyword arguments for the parameters you would like to
        set, e.g.

        >>> from l2sa.settings import Settings
        >>> Settings.set(precision='f64')
        """
        for k,v in kwargs.items():
            Settings._set(k, v)
    def _set(name, value):
        """Validate and store a single setting."""
        if name not in Settings.__global_setting_values.keys():
            raise NameError("Invalid setting %s" % name)
        if not Settings.__validate_settings[name](value):
            raise ValueError("Invalid setting: %s = %s" % (name, value))
        Settings.__global_setting_values[name] = value
        # Runtime verification is owned by paranoid, so keep both in
        # step.
        if name == 'verify':
            _ParanoidSettings.set(enabled=value)
        elif name == 'log_level':
            logging.getLogger('l2sa').setLevel(value)
    def get(name):
        """Get the value of the setting `name`."""
        return Settings.__global_setting_values[name]
    def dtype():
        """The numpy element type selected by the `precision` setting."""
        return _DTYPES[Settings.__global_setting_values['precision']]
    @contextmanager
    def override(**kwargs):
        """Temporarily change settings within a with block.

        >>> with Settings.override(precision='f64'):
        ...     report = grad_check(...)
        """
        previous = {k : Settings.get(k) for k in kwargs.keys()}
        Settings.set(**kwargs)
        try:
            yield
        finally:
            Settings.set(**previous)
