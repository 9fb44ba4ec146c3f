#!/usr/bin/env python3

import os
import json
import logging
import importlib.util
from typing import Any, Dict, Optional

from errors import BackendError
from slot_engine import BackendBase

logger = logging.getLogger(__name__)

DEFAULT_APP_SETTINGS = {
    "hoisted_rotation_weight": 0.5,
    "nonlinear_mode": "exact",
    "debug_domain_checks": False,
    "default_seed": 0,
}


class BackendManager:
    """Discovers slot backends and keeps the enabled backend and app settings"""

    def __init__(self, root: Optional[str] = None):
        root = root or os.path.dirname(os.path.abspath(__file__))
        self.backends_dir = os.path.join(root, 'backends')
        self.settings_file = os.path.join(root, 'slotforge_settings.json')
        self.available_backends: Dict[str, Dict] = {}
        self._modules: Dict[str, Any] = {}
        self.enabled_backend = "simulator"
        self.app_settings: Dict[str, Any] = dict(DEFAULT_APP_SETTINGS)

        self.load_settings()
        self.discover_backends()

    def discover_backends(self):
        """Discover all backends under the backends directory"""
        if not os.path.isdir(self.backends_dir):
            logger.warning("backends directory %s not found", self.backends_dir)
            return

        for item in sorted(os.listdir(self.backends_dir)):
            backend_path = os.path.join(self.backends_dir, item)
            manifest_path = os.path.join(backend_path, 'manifest.json')
            if not os.path.isdir(backend_path) or not os.path.exists(manifest_path):
                continue
            try:
                with open(manifest_path, 'r') as f:
                    manifest = json.load(f)

                required_fields = ['name', 'version', 'description', 'main_file']
                if all(field in manifest for field in required_fields):
                    manifest['path'] = backend_path
                    self.available_backends[item] = manifest
                else:
                    logger.warning("backend %s missing required manifest fields", item)
            except (OSError, ValueError) as e:
                logger.warning("error reading manifest for backend %s: %s", item, e)

    def _load_module(self, backend_id: str):
        if backend_id in self._modules:
            return self._modules[backend_id]
        if backend_id not in self.available_backends:
            raise BackendError(f"Unknown backend '{backend_id}'. Available: {', '.join(self.available_backends)}")

        manifest = self.available_backends[backend_id]
        main_file = os.path.join(manifest['path'], manifest['main_file'])
        try:
            spec = importlib.util.spec_from_file_location(f"backend_{backend_id}", main_file)
            module = importlib.util.module_from_spec(spec)
            spec.loader.exec_module(module)
        except Exception as e:
            raise BackendError(f"Error loading backend {backend_id}: {e}") from e

        if not hasattr(module, 'Backend'):
            raise BackendError(f"Backend {backend_id} does not have a 'Backend' class")
        self._modules[backend_id] = module
        return module

    def instantiate(self, backend_id: str) -> BackendBase:
        """Create a fresh, unbound backend instance"""
        module = self._load_module(backend_id)
        backend = module.Backend()
        if not isinstance(backend, BackendBase):
            raise BackendError(f"Backend {backend_id} does not derive from BackendBase")
        manifest = self.available_backends[backend_id]
        backend.name = manifest['name']
        backend.version = manifest['version']
        backend.description = manifest['description']
        return backend

    def get_available_backends(self) -> Dict[str, Dict]:
        return self.available_backends.copy()

    def enable_backend(self, backend_id: str) -> bool:
        if backend_id not in self.available_backends:
            return False
        self.enabled_backend = backend_id
        self.save_settings()
        return True

    def get_app_setting(self, name: str, default: Any = None) -> Any:
        if default is None:
            default = DEFAULT_APP_SETTINGS.get(name)
        return self.app_settings.get(name, default)

    def load_settings(self):
        """Load backend and app settings from file"""
        try:
            if os.path.exists(self.settings_file):
                with open(self.settings_file, 'r') as f:
                    settings = json.load(f)
                self.enabled_backend = settings.get('enabled_backend', self.enabled_backend)
                self.app_settings.update(settings.get('app_settings', {}))
        except (OSError, ValueError) as e:
            logger.warning("error loading settings %s, using defaults: %s", self.settings_file, e)
            self.enabled_backend = "simulator"
            self.app_settings = dict(DEFAULT_APP_SETTINGS)

    def save_settings(self):
        try:
            settings = {
                'enabled_backend': self.enabled_backend,
                'app_settings': self.app_settings,
            }
            with open(self.settings_file, 'w') as f:
                json.dump(settings, f, indent=2)
        except OSError as e:
            logger.warning("error saving settings: %s", e)


# Global backend manager instance
backend_manager = BackendManager()


def get_app_setting(name: str, default: Any = None) -> Any:
    return backend_manager.get_app_setting(name, default)
