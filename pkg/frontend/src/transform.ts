/**
 * Viewport <-> image coordinate transforms.
 *
 * The viewport shows the image scaled by `zoom` with the image origin at
 * viewport offset (panX, panY). Target points are always stored in source
 * image pixels, so any (zoom, pan) sequence followed by a click must land
 * on the same pixel as clicking at zoom 1.
 */

export interface Viewport {
  zoom: number;
  panX: number;
  panY: number;
}

export interface Point {
  x: number;
  y: number;
}

export const IDENTITY_VIEW: Viewport = { zoom: 1, panX: 0, panY: 0 };

export function viewportToImage(view: Viewport, vx: number, vy: number): Point {
  return { x: (vx - view.panX) / view.zoom, y: (vy - view.panY) / view.zoom };
}

export function imageToViewport(view: Viewport, ix: number, iy: number): Point {
  return { x: ix * view.zoom + view.panX, y: iy * view.zoom + view.panY };
}

/** Pixel the click lands on, or null when outside the image. */
export function pickPixel(
  view: Viewport, vx: number, vy: number, width: number, height: number,
): Point | null {
  const p = viewportToImage(view, vx, vy);
  const x = Math.floor(p.x);
  const y = Math.floor(p.y);
  if (x < 0 || y < 0 || x >= width || y >= height) return null;
  return { x, y };
}

/** Zoom about a viewport anchor so the pixel under the cursor stays put. */
export function zoomAt(view: Viewport, factor: number, anchorVx: number, anchorVy: number): Viewport {
  const before = viewportToImage(view, anchorVx, anchorVy);
  const zoom = view.zoom * factor;
  return {
    zoom,
    panX: anchorVx - before.x * zoom,
    panY: anchorVy - before.y * zoom,
  };
}

export function pan(view: Viewport, dx: number, dy: number): Viewport {
  return { zoom: view.zoom, panX: view.panX + dx, panY: view.panY + dy };
}
