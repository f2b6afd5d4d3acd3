// Rectangle annotation over a displayed image. Drag state is pure data so
// the logic is testable without a canvas; drawing binds at the edge.

import type { RectAnnotation } from './api'

export interface DragState {
  startX: number
  startY: number
  currentX: number
  currentY: number
  active: boolean
}

export function beginDrag(x: number, y: number): DragState {
  return { startX: x, startY: y, currentX: x, currentY: y, active: true }
}

export function updateDrag(drag: DragState, x: number, y: number): DragState {
  return { ...drag, currentX: x, currentY: y }
}

/** Normalized rectangle regardless of drag direction; null for degenerate drags. */
export function finishDrag(drag: DragState, minSize = 2): RectAnnotation | null {
  const x = Math.min(drag.startX, drag.currentX)
  const y = Math.min(drag.startY, drag.currentY)
  const width = Math.abs(drag.currentX - drag.startX)
  const height = Math.abs(drag.currentY - drag.startY)
  if (width < minSize || height < minSize) return null
  return { x, y, width, height }
}

export function drawRects(
  ctx: CanvasRenderingContext2D,
  rects: RectAnnotation[],
  pending?: DragState,
): void {
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height)
  ctx.strokeStyle = '#30d158'
  ctx.lineWidth = 1.5
  for (const r of rects) {
    ctx.strokeRect(r.x, r.y, r.width, r.height)
  }
  if (pending?.active) {
    ctx.strokeStyle = '#ffd60a'
    const r = finishDrag(pending, 0)
    if (r) ctx.strokeRect(r.x, r.y, r.width, r.height)
  }
}
