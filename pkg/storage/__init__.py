from .catalog import Catalog
from .models import AlbumMeta, UsageEvent, Slate, SlateEntry, EventType, Policy, Section

__all__ = ['Catalog', 'AlbumMeta', 'UsageEvent', 'Slate', 'SlateEntry', 'EventType', 'Policy', 'Section']
