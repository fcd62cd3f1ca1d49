"""Per-frame sizes and picture types from H.264 Annex-B streams.

Only the parts of the syntax that locate access units and order them
for display are read: NAL unit headers, sequence and picture parameter
sets, and the start of slice headers.
"""

from dataclasses import dataclass
import logging

from bitstring import BitStream, ReadError
import numpy as np

from .exceptions import ParseError

__all__ = (
    'AccessUnit',
    'parse_access_units',
    'per_frame_sizes',
    'picture_types',
    'split_nal_units',
)

logger = logging.getLogger(__name__)

NAL_SLICE = 1
NAL_SLICE_DATA_PARTITION_A = 2
NAL_SLICE_IDR = 5
NAL_SEI = 6
NAL_SPS = 7
NAL_PPS = 8
NAL_ACCESS_UNIT_DELIMITER = 9

VCL_TYPES = (NAL_SLICE, NAL_SLICE_DATA_PARTITION_A, NAL_SLICE_IDR)
# Non-VCL units that open a new access unit once it has a picture.
AU_OPENERS = (NAL_SEI, NAL_SPS, NAL_PPS, NAL_ACCESS_UNIT_DELIMITER,
              14, 15, 16, 17, 18)

# slice_type modulo 5; SP and SI slices count as P and I.
SLICE_TYPES = {0: 'P', 1: 'B', 2: 'I', 3: 'P', 4: 'I'}

HIGH_PROFILES = (100, 110, 122, 244, 44, 83, 86, 118, 128, 138, 139, 134,
                 135)


@dataclass(frozen=True)
class NalUnit:
    """One NAL unit and the bytes it occupies in the stream.

    Attributes:
        offset (int): Offset of the start code.
        size (int): Bytes from the start code to the next start code.
        payload (bytes): The NAL unit, header included, without the
            start code.
    """

    offset: int
    size: int
    payload: bytes

    @property
    def nal_ref_idc(self):
        """Whether, and how much, the unit is used for reference."""
        return (self.payload[0] >> 5) & 0x3

    @property
    def nal_unit_type(self):
        """The unit type from the header byte."""
        return self.payload[0] & 0x1f


@dataclass(frozen=True)
class AccessUnit:
    """A coded picture and the parameter sets and SEI sent with it.

    Attributes:
        size (int): Bytes in the access unit, start codes included.
        picture_type (str): ``I``, ``P``, or ``B``.
        poc (int): Picture order count within its IDR period.
        idr_index (int): Number of IDR pictures before this one.
        decode_index (int): Position in decoding order.
    """

    size: int
    picture_type: str
    poc: int
    idr_index: int
    decode_index: int

    @property
    def display_key(self):
        """Sorts access units into display order."""
        return self.idr_index, self.poc


@dataclass
class _Sps:
    log2_max_frame_num: int
    poc_type: int
    log2_max_poc_lsb: int = 0
    frame_mbs_only: bool = True
    separate_colour_plane: bool = False


@dataclass
class _Pps:
    sps_id: int


@dataclass
class _SliceHeader:
    nal_unit_type: int
    nal_ref_idc: int
    first_mb: int
    slice_type: int
    pps_id: int
    frame_num: int
    idr_pic_id: int = 0
    poc_lsb: int = 0
    field_pic: bool = False

    @property
    def idr(self):
        """Whether the slice belongs to an IDR picture."""
        return self.nal_unit_type == NAL_SLICE_IDR

    def starts_new_picture(self, first):
        """Return whether this slice opens a picture after ``first``."""
        return (
            self.first_mb == 0
            or self.pps_id != first.pps_id
            or self.frame_num != first.frame_num
            or self.field_pic != first.field_pic
            or (self.nal_ref_idc == 0) != (first.nal_ref_idc == 0)
            or self.idr != first.idr
            or (self.idr and self.idr_pic_id != first.idr_pic_id)
            or self.poc_lsb != first.poc_lsb
        )


def split_nal_units(bitstream):
    """Split an Annex-B byte stream into NAL units.

    Each unit owns the bytes from its start code up to the next start
    code, so the unit sizes add up to the stream's length. A zero byte
    preceding a three-byte start code belongs to that start code.

    Args:
        bitstream (bytes): The elementary stream.

    Returns:
        List[NalUnit]: The units in stream order.

    Raises:
        ParseError: If the stream doesn't start with a start code.

    """
    bits = BitStream(bytes=bitstream)
    starts = []
    for position in bits.findall('0x000001', bytealigned=True):
        offset = position // 8
        if offset and bitstream[offset - 1] == 0:
            offset -= 1
        starts.append((offset, position // 8 + 3))

    if not starts or starts[0][0] != 0:
        raise ParseError('The stream does not start with a start code.')

    units = []
    for (offset, begin), following in zip(
            starts, starts[1:] + [(len(bitstream), None)]):
        end = following[0]
        payload = bitstream[begin:end].rstrip(b'\x00')
        if not payload:
            raise ParseError('Empty NAL unit at byte {}.'.format(offset))
        units.append(NalUnit(offset, end - offset, payload))
    return units


def _rbsp(payload):
    """Return the NAL unit payload without emulation prevention bytes."""
    return payload.replace(b'\x00\x00\x03', b'\x00\x00')


def _skip_scaling_list(bits, size):
    last, following = 8, 8
    for _ in range(size):
        if following:
            following = (last + bits.read('se') + 256) % 256
        last = following or last


def _parse_sps(payload):
    bits = BitStream(bytes=_rbsp(payload))
    bits.pos = 8
    profile_idc = bits.read('uint:8')
    bits.read('uint:16')  # constraint flags, level_idc
    sps_id = bits.read('ue')

    separate_colour_plane = False
    if profile_idc in HIGH_PROFILES:
        chroma_format_idc = bits.read('ue')
        if chroma_format_idc == 3:
            separate_colour_plane = bool(bits.read('uint:1'))
        bits.read('ue')  # bit_depth_luma_minus8
        bits.read('ue')  # bit_depth_chroma_minus8
        bits.read('uint:1')  # qpprime_y_zero_transform_bypass_flag
        if bits.read('uint:1'):  # seq_scaling_matrix_present_flag
            for i in range(8 if chroma_format_idc != 3 else 12):
                if bits.read('uint:1'):
                    _skip_scaling_list(bits, 16 if i < 6 else 64)

    sps = _Sps(
        log2_max_frame_num=bits.read('ue') + 4,
        poc_type=bits.read('ue'),
        separate_colour_plane=separate_colour_plane,
    )
    if sps.poc_type == 0:
        sps.log2_max_poc_lsb = bits.read('ue') + 4
    elif sps.poc_type == 1:
        bits.read('uint:1')  # delta_pic_order_always_zero_flag
        bits.read('se')  # offset_for_non_ref_pic
        bits.read('se')  # offset_for_top_to_bottom_field
        for _ in range(bits.read('ue')):
            bits.read('se')  # offset_for_ref_frame
    bits.read('ue')  # max_num_ref_frames
    bits.read('uint:1')  # gaps_in_frame_num_value_allowed_flag
    bits.read('ue')  # pic_width_in_mbs_minus1
    bits.read('ue')  # pic_height_in_map_units_minus1
    sps.frame_mbs_only = bool(bits.read('uint:1'))
    return sps_id, sps


def _parse_pps(payload):
    bits = BitStream(bytes=_rbsp(payload))
    bits.pos = 8
    pps_id = bits.read('ue')
    sps_id = bits.read('ue')
    return pps_id, _Pps(sps_id)


def _parse_slice_header(unit, sps_sets, pps_sets):
    bits = BitStream(bytes=_rbsp(unit.payload[:64]))
    bits.pos = 8
    first_mb = bits.read('ue')
    slice_type = bits.read('ue') % 5
    pps_id = bits.read('ue')
    try:
        pps = pps_sets[pps_id]
        sps = sps_sets[pps.sps_id]
    except KeyError:
        raise ParseError(
            'A slice refers to missing parameter sets.') from None

    if sps.separate_colour_plane:
        bits.read('uint:2')  # colour_plane_id
    header = _SliceHeader(
        nal_unit_type=unit.nal_unit_type,
        nal_ref_idc=unit.nal_ref_idc,
        first_mb=first_mb,
        slice_type=slice_type,
        pps_id=pps_id,
        frame_num=bits.read('uint:{}'.format(sps.log2_max_frame_num)),
    )
    if not sps.frame_mbs_only:
        header.field_pic = bool(bits.read('uint:1'))
        if header.field_pic:
            raise ParseError('Field coding is not supported.')
    if header.idr:
        header.idr_pic_id = bits.read('ue')
    if sps.poc_type == 0:
        header.poc_lsb = bits.read('uint:{}'.format(sps.log2_max_poc_lsb))
    return header


class _PocCounter:
    """Derives picture order counts for frame-coded pictures."""

    def __init__(self):
        self.previous_msb = 0
        self.previous_lsb = 0
        self.frame_num_offset = 0
        self.previous_frame_num = 0

    def __call__(self, header, sps):
        if sps.poc_type == 0:
            if header.idr:
                self.previous_msb = self.previous_lsb = 0
            maximum = 1 << sps.log2_max_poc_lsb
            lsb = header.poc_lsb
            msb = self.previous_msb
            if (lsb < self.previous_lsb
                    and self.previous_lsb - lsb >= maximum // 2):
                msb += maximum
            elif (lsb > self.previous_lsb
                    and lsb - self.previous_lsb > maximum // 2):
                msb -= maximum
            if header.nal_ref_idc:
                self.previous_msb, self.previous_lsb = msb, lsb
            return msb + lsb

        if sps.poc_type == 2:
            if header.idr:
                self.frame_num_offset = 0
            elif header.frame_num < self.previous_frame_num:
                self.frame_num_offset += 1 << sps.log2_max_frame_num
            self.previous_frame_num = header.frame_num
            poc = 2 * (self.frame_num_offset + header.frame_num)
            return poc - 1 if header.nal_ref_idc == 0 else poc

        raise ParseError(
            'Picture order count type {} is not supported.'.format(
                sps.poc_type))


def parse_access_units(bitstream):
    """Group a stream's NAL units into access units.

    Args:
        bitstream (bytes): An H.264 Annex-B elementary stream.

    Returns:
        List[AccessUnit]: The access units in decoding order. Their sizes
            add up to the length of the stream.

    Raises:
        ParseError: If the stream is malformed or truncated.

    """
    sps_sets, pps_sets = {}, {}
    units = []
    pending = 0
    current = None
    poc_counter = _PocCounter()
    idr_index = -1

    def close():
        nonlocal current
        if current is not None:
            size, header, sps = current
            units.append(AccessUnit(
                size=size,
                picture_type=SLICE_TYPES[header.slice_type],
                poc=poc_counter(header, sps),
                idr_index=idr_index,
                decode_index=len(units),
            ))
        current = None

    try:
        for unit in split_nal_units(bitstream):
            kind = unit.nal_unit_type
            if kind in VCL_TYPES:
                header = _parse_slice_header(unit, sps_sets, pps_sets)
                if current is None or header.starts_new_picture(current[1]):
                    close()
                    if header.idr:
                        idr_index += 1
                    if idr_index < 0:
                        raise ParseError('The stream does not start with '
                                         'an IDR picture.')
                    sps = sps_sets[pps_sets[header.pps_id].sps_id]
                    current = [pending + unit.size, header, sps]
                    pending = 0
                else:
                    current[0] += unit.size
                continue

            if kind in AU_OPENERS:
                close()
            if kind == NAL_SPS:
                sps_id, sps = _parse_sps(unit.payload)
                sps_sets[sps_id] = sps
            elif kind == NAL_PPS:
                pps_id, pps = _parse_pps(unit.payload)
                pps_sets[pps_id] = pps

            if current is None:
                pending += unit.size
            else:
                current[0] += unit.size
        close()
    except ReadError as e:
        raise ParseError('The stream is truncated: {}'.format(e)) from e

    if pending:
        raise ParseError(
            'The stream ends with {} bytes that belong to no picture.'.format(
                pending))
    if not units:
        raise ParseError('The stream contains no pictures.')

    logger.debug('bitstream.parsed', extra={
        'access_units': len(units), 'bytes': len(bitstream)})
    return units


def _display_order(units):
    return sorted(units, key=lambda unit: unit.display_key)


def per_frame_sizes(bitstream, frames=None):
    """Return the size of each coded frame in display order.

    Args:
        bitstream (bytes): An H.264 Annex-B elementary stream.
        frames (Optional[int]): The number of frames expected.

    Returns:
        numpy.ndarray: Sizes in bytes, one per frame, in display order.

    Raises:
        ParseError: If the stream can't be parsed or doesn't hold the
            expected number of frames.

    """
    units = _display_order(parse_access_units(bitstream))
    if frames is not None and len(units) != frames:
        raise ParseError('Expected {} frames, the stream holds {}.'.format(
            frames, len(units)))
    return np.array([unit.size for unit in units], dtype=np.int64)


def picture_types(bitstream):
    """Return the picture type of each frame in display order."""
    units = _display_order(parse_access_units(bitstream))
    return tuple(unit.picture_type for unit in units)
