/** Geometry for drawing detector boxes over a scaled-down <img>. */

export interface Rect {
  left: number;
  top: number;
  width: number;
  height: number;
}

/** Map a pixel-space box onto an element rendered at a different size. */
export function scaleBox(box: [number, number, number, number],
                         naturalW: number, naturalH: number,
                         displayW: number, displayH: number): Rect {
  const sx = naturalW > 0 ? displayW / naturalW : 1;
  const sy = naturalH > 0 ? displayH / naturalH : 1;
  const [x0, y0, x1, y1] = box;
  return {
    left: x0 * sx,
    top: y0 * sy,
    width: (x1 - x0) * sx,
    height: (y1 - y0) * sy,
  };
}
