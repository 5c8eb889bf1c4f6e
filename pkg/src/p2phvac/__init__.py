"""Community energy scheduling with HVAC, batteries and peer-to-peer trading."""
