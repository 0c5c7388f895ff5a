from infra.image_store import ImageStore

__all__ = ['ImageStore']
